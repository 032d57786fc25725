"""iksim: constraint-based closed-loop inverse kinematics toolkit.

Task specifications (equality / set / velocity constraints over robot,
virtual, and input variables) compile into four interchangeable
joint-velocity controllers: reactive QP, reactive NLP, multiple-shooting
MPC, and set-based task-priority null-space projection. A scenario runner
simulates them on serial manipulators, and a FastAPI service plus ``iksim``
CLI expose the runner.
"""

__all__ = ["exprgraph", "kinematics", "tasks", "solvers", "controllers",
           "simrunner", "scenarios", "dsl"]
__version__ = "0.1.0"


def __getattr__(name):
    if name in __all__:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
