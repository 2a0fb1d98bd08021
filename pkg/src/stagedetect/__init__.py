"""Three-stage malware detection: static forest, behavioral LSTM, context-aware boosted fusion."""

__version__ = "0.1.0"
