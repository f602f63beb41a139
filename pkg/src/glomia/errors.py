"""Exception hierarchy shared across the package."""


class GlomiaError(Exception):
    """Base class for every error raised by this package."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class ShapeError(GlomiaError, ValueError):
    code = "shape_error"


class RangeError(GlomiaError, ValueError):
    code = "range_error"


class NumericalError(GlomiaError, ArithmeticError):
    code = "numerical_error"


class DivergedError(NumericalError):
    code = "diverged"


class ConfigError(GlomiaError, ValueError):
    code = "config_error"


class DegenerateError(GlomiaError, ValueError):
    code = "degenerate"


class EmptyCorpus(GlomiaError, ValueError):
    code = "empty_corpus"


class EmptyGraph(GlomiaError, ValueError):
    code = "empty_graph"


# parser errors


class ParseError(GlomiaError):
    code = "parse_error"


class FileMissing(ParseError):
    code = "file_missing"


class CrossGraphEdge(ParseError):
    code = "cross_graph_edge"


class RowCountMismatch(ParseError):
    code = "row_count_mismatch"


class FeatureSourceMissing(ParseError):
    code = "feature_source_missing"
