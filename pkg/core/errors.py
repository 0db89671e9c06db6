"""
Exception hierarchy shared by every DepthProbe layer
"""


class DepthProbeError(Exception):
    """Base error; `code` is the short machine-parsable reason printed by the CLI"""

    code = 'depthprobe_error'

    def __init__(self, message: str, code: str = None):
        super().__init__(message)
        if code:
            self.code = code


class NumericsError(DepthProbeError):
    """Invalid input to a numeric kernel"""
    code = 'numerics'


class ModelError(DepthProbeError):
    """Bad model configuration, prompt or forward request"""
    code = 'model'


class PromptFormatError(DepthProbeError):
    """Unreadable FASTA / plain-text prompt file"""
    code = 'prompt_format'


class CheckpointFormatError(DepthProbeError):
    """Malformed .dpw container"""
    code = 'checkpoint_format'

    def __init__(self, message: str, tensor: str = None, code: str = None):
        if tensor:
            message = f"{message} (tensor '{tensor}')"
        super().__init__(message, code)
        self.tensor = tensor


class InterventionError(DepthProbeError):
    """Invalid intervention spec or experiment input"""
    code = 'intervention'


class AssayFormatError(DepthProbeError):
    """Malformed assay CSV or mutation code"""
    code = 'assay_format'

    def __init__(self, message: str, rows=None, code: str = None):
        if rows:
            message = f"{message} at row(s) {', '.join(str(r) for r in rows)}"
        super().__init__(message, code)
        self.rows = list(rows or [])


class ScoringError(DepthProbeError):
    """Scoring request incompatible with the model or assay"""
    code = 'scoring'


class GeneratorError(DepthProbeError):
    """Invalid synthetic generator request"""
    code = 'generator'


class TrainingError(DepthProbeError):
    """Training aborted"""
    code = 'training'


class ReportError(DepthProbeError):
    """Figure could not be rendered"""
    code = 'report'
