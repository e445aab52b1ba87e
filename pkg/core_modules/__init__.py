"""Core modules of the tactile transfer simulator."""
