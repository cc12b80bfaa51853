class AvatarException(Exception):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class InvalidArgument(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class ShapeMismatch(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class NotOnTape(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class NonFiniteValue(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class SingularTransform(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class DegenerateBlend(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class ConfigValidationError(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class MissingResource(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class EmptySurface(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)


class NumericalFailure(AvatarException):
    def __init__(self, *args: object) -> None:
        super().__init__(*args)
