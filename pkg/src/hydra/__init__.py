"""Container supervision engine with daemon-independent container lifetimes.

Containers are parented by small per-container monitor processes instead of
the managing daemon, so the daemon can crash, upgrade, or restart without
taking any container down with it.
"""

__version__ = "0.1.0"
