"""Exception hierarchy shared by all forgemorph modules.

Every error raised on bad input derives from :class:`ForgeMorphError`, which
lets the CLI map failures to exit codes without catching unrelated bugs.
"""


class ForgeMorphError(ValueError):
    """Base class for input and configuration errors."""


# network graphs

class MalformedDocument(ForgeMorphError):
    pass


class ShapeMismatch(ForgeMorphError):
    pass


class DegenerateShape(ShapeMismatch):
    """A convolution or pooling window produces an output dimension < 1."""


class CyclicGraph(ForgeMorphError):
    pass


class DanglingConnection(ForgeMorphError):
    pass


class UnsupportedTopology(ForgeMorphError):
    pass


# cost model

class UnsupportedKernel(ForgeMorphError):
    pass


class IncompleteTerms(ForgeMorphError):
    pass


class InvalidAllocation(ForgeMorphError):
    pass


# exploration

class NoFeasibleDesign(ForgeMorphError):
    pass


class LengthMismatch(ForgeMorphError):
    pass


# morphing

class InvalidCut(ForgeMorphError):
    pass


class EmptyBlock(ForgeMorphError):
    pass


class TooNarrow(ForgeMorphError):
    pass


class DegenerateFit(ForgeMorphError):
    pass


# distillation

class DimMismatch(ForgeMorphError):
    pass


class EmptyBlocks(ForgeMorphError):
    pass
