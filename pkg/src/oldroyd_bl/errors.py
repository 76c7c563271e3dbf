"""Error type shared by the solvers and the harness."""


class SolverError(RuntimeError):
    """Raised with a short machine-readable ``code``.

    Codes in use: ``unstable-dt``, ``diverged``, ``insufficient-resolution``,
    ``layer-box-too-small``, ``trajectory-misaligned``, ``ledger-incomplete``,
    ``exact-or-invalid``, ``grid-mismatch``, ``invalid-config``,
    ``quadrature``.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
