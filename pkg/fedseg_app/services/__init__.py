"""
Service layer for the fedseg command-line application.
"""
