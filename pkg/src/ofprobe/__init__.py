"""Active network measurement through OpenFlow switches.

A controller turns any connected OpenFlow 1.3 switch into a measurement
vantage point: it emits ICMP probes as PacketOut messages, reads answers
back from PacketIn events, and corrects the control-channel detour out
of every timing with a continuously tracked switch RTT estimate.
"""

__version__ = "0.1.0"

from .engine import (  # noqa: F401
    MeasurementEngine,
    NoActiveSession,
    ProbeSettings,
    RttEstimator,
    StateFull,
)
from .frames import RouterIdentity  # noqa: F401
from .netsim import SimSwitch, SimTopology, load_topology  # noqa: F401
from .session import SwitchSession  # noqa: F401
