"""Controllable lyric-to-melody generation with aligned melody tokens."""
