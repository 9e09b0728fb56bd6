"""
curdistill utilities package
Validation, augmentation, schedules and JSON-lines writers
"""
