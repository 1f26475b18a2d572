"""
Configuration management - tune jobs, thresholds and checkpoint paths in ONE place.
Every field can be overridden from the environment with the SQUASHFIX_ prefix
(e.g. SQUASHFIX_CHECKPOINT_DIR) or from a local .env file.
"""

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Runtime
    LOG_LEVEL: str = "INFO"
    JOBS: int = 1

    # Search engine
    CHECKPOINT_DIR: str = "checkpoints"
    CHECKPOINT_INTERVAL: float = 10.0  # seconds of work between checkpoint flushes
    CHUNK_POSITIONS: int = 64  # first-flip positions handed to a worker per task
    VERIFY_HITS: bool = True  # re-run screen hits through the exact inflater

    # Dump analysis
    PAGE_TOTAL: int = 2176
    PAGE_DATA: int = 2048
    ENTROPY_WINDOW: int = 65536
    ENTROPY_STRIDE: int = 16384
    ENCRYPTED_THRESHOLD: float = 0.9998
    COMPRESSED_THRESHOLD: float = 0.998
    HIGH_ENTROPY_FLOOR: float = 0.95

    # SquashFS
    METADATA_MAX: int = 8192

    # Statistics
    LENGTH_UNIT: str = "bits"
    TAIL_PROB: float = 0.01

    # Corpus
    CORPUS_BUILDER: str = "auto"  # auto | builtin | mksquashfs
    MKSQUASHFS: str = "mksquashfs"
    UNSQUASHFS: str = "unsquashfs"

    class Config:
        env_file = ".env"
        env_prefix = "SQUASHFIX_"
        extra = "ignore"


settings = Settings()
