"""Layoff detection, affected-user classification and unemployment nowcasting from call detail records."""

__version__ = "0.1.0"
