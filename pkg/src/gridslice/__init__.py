"""RAN slicing simulator for IEC 61850 substation traffic with a two-layer DRL scheduler."""

__version__ = "0.1.0"
