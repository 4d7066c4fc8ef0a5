'''
morphkit: multi-view face scans fused, registered and turned into a linear morphable model,
with the reconstruction benchmark and a synthetic population to run it on.
'''
__version__ = '0.1.0'
