__version__ = "0.1.0"


def __getattr__(name):
    # lazy so that importing the CLI does not load numpy before --threads is applied
    if name == "BACKEND":
        from .kernels import BACKEND
        return BACKEND
    raise AttributeError(name)
