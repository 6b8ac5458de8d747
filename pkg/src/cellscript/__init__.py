"""cellscript: a graph-programmed runtime for perception-guided
pick-and-place cells.

Programs are control-flow graphs whose movement decisions are left open at
authoring time; a skeleton-based task-and-motion planner binds them at run
time, and a pipelined interpreter overlaps that planning with execution.
"""

__version__ = "0.1.0"

from .geometry import Pose, wrap_angle
from .values import VariableMap, init_map, map_digest

__all__ = ["Pose", "wrap_angle", "VariableMap", "init_map", "map_digest", "__version__"]
