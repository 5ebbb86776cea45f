"""Attention-weight exporter: small causal LMs to ATNW dump files."""

from weight_exporter.dumpfmt import VerifyReport, verify_dump
from weight_exporter.export import CapabilityError, ExportJob, export_attention_dumps

__all__ = [
    "CapabilityError",
    "ExportJob",
    "VerifyReport",
    "export_attention_dumps",
    "verify_dump",
]
__version__ = "0.1.0"
