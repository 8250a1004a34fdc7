"""
Utility helpers: worker pool, checkpoint auto-save, exporters, formatters
and validators.
"""
