"""
Experiment driver and command-line front end for fedseg.
"""
