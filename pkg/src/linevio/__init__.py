"""Event-camera + IMU odometry with 3D line landmarks.

Modules: geometry (transforms, SO(3), projection), imu (queryable
preintegration), frontend (spatio-temporal clustering), backend (residuals
and the batch solver), sim (synthetic oracle data), evaluation (alignment
and error metrics), dataio (file formats, run config), pipeline (window
orchestration), cli (command-line driver).
"""

__version__ = "0.1.0"
