"""crashreplay: reproduce Android app crashes from natural-language bug reports.

Pipeline: retrieval-grounded step extraction (rag + grammar), a feedback
replay loop against a device (gateway + device + replay), transition-graph
exploration when the loop gets stuck (explorer), and metric reporting
(evaluator).  Everything runs offline against the bundled app simulator and
scripted model gateway.
"""

__version__ = "0.1.0"

from .gateway import ActionCommand
from .grammar import ActionType, Direction, S2REntity, S2RScript

__all__ = ["ActionCommand", "ActionType", "Direction", "S2REntity", "S2RScript", "__version__"]
