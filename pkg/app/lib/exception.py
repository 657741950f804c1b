from app.constants.status import Status


class TmException(Exception):
    def __init__(self, code: Status, msg: str):
        self.code = code
        self.msg = msg
        super().__init__(msg)

    def __str__(self) -> str:
        return f"[{self.code.name}] {self.msg}"
