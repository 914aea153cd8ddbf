from .decoder import LongitudinalReportModel

__all__ = ["LongitudinalReportModel"]
