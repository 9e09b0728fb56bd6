"""
curdistill services package
Contains the dataset, network, training, selection, synthesis,
curriculum and evaluation logic
"""
