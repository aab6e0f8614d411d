"""Event-camera odometry by contrast maximization of volumetric ray densities.

Modules
-------
core        events, pinhole camera, rigid transforms
trajectory  Ackermann arcs, planar B-splines, sampled paths
field       voxel grids and ray-density accumulation
objective   variance objectives and gradient-ascent solvers
pipeline    front-end, back-end, depth maps and relative pose error
synth       synthetic scenes and event generation with ground truth
io          file formats
cli         command-line entry points
"""

__version__ = "0.1.0"
