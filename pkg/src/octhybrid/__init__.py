"""Hybrid CNN+FCN glaucoma classification on peripapillary OCT polar maps.

Subpackages by concern:

- :mod:`octhybrid.maps` polar maps, azimuthal filter, superpixel grids
- :mod:`octhybrid.phantom` synthetic cohort generator
- :mod:`octhybrid.nn`, :mod:`octhybrid.hybrid` numpy CNN+FCN and training
- :mod:`octhybrid.baselines` ridge-penalized logistic regression
- :mod:`octhybrid.evaluation` splits, ROC/AUC, DeLong test
- :mod:`octhybrid.commands`, :mod:`octhybrid.cli` the command line
"""
__version__ = "0.1.0"
