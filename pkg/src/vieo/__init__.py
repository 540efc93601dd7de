"""Visual-inertial-encoder odometry toolkit for spinning-camera rigs.

Submodules:

* :mod:`vieo.geom`       rotation / unit-sphere primitives
* :mod:`vieo.solver`     manifold-aware sparse Levenberg-Marquardt
* :mod:`vieo.preint`     IMU preintegration between camera triggers
* :mod:`vieo.dataset`    dataset container and on-disk format
* :mod:`vieo.sim`        deterministic rig simulator with ground truth
* :mod:`vieo.calib`      spin-axis / extrinsic calibration
* :mod:`vieo.estimator`  tightly coupled sliding-window odometry
* :mod:`vieo.active`     feature-distribution scoring and spin control
* :mod:`vieo.evaluate`   trajectory alignment and error metrics
* :mod:`vieo.cli`        command-line entry point (``vieo``)
"""

__version__ = "0.1.0"
