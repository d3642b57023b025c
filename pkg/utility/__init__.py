"""
Shared helpers: settings, hashing, atomic writes and seeded random streams.
"""
