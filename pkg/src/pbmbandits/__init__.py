from pbmbandits.core.version import VERSION

__version__ = VERSION
