"""Spiking model of perceptual decisions on random dot motion.

Modules: ``stimulus`` (RDK movies and datasets), ``retina`` (LGN drive),
``dynamics`` (LIF/OU/synapse primitives), ``network`` (the LGN-V1-MT-LIP
circuit and single trials), ``behavior`` (psychometric analysis),
``experiments`` (sweeps) and ``config``/``cli``.
"""

__version__ = "0.1.0"
