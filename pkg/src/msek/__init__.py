"""Self-adaptation loop (monitor / synthesize / execute over shared knowledge)
for an elastic brownout-capable web-server farm, with a trace-driven simulator
as the managed system."""

__version__ = "0.1.0"
