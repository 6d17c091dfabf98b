"""Exception hierarchy shared by all terrafollow modules."""


class TerrafollowError(Exception):
    """Base class for every error raised by this package."""


class OutOfRange(TerrafollowError):
    """Pose lookup outside the span of a track."""


class GapTooLarge(TerrafollowError):
    """Bracketing pose samples are further apart than the track allows."""


class FrameRegistrationError(TerrafollowError):
    """Too many returns of one frame could not be registered."""


class MalformedRecord(TerrafollowError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class MissingFile(TerrafollowError, FileNotFoundError):
    pass


class ConfigError(TerrafollowError, ValueError):
    def __init__(self, message, path=None, line_no=None, key=None):
        self.key = key
        where = ""
        if path is not None:
            where = f"{path}:{line_no}: " if line_no is not None else f"{path}: "
        elif line_no is not None:
            where = f"line {line_no}: "
        super().__init__(where + message)


class NoCandidates(TerrafollowError):
    """The prior height window of a cell contains no points."""


class Degenerate(TerrafollowError):
    """A point set cannot support a plane (too few, collinear or coincident)."""


class EmptyLattice(TerrafollowError):
    pass


class TooFewPoints(TerrafollowError):
    pass


class RankDeficient(TerrafollowError):
    pass
