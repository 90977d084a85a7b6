"""Run configuration: every trainable/model knob, serializable as key=value text."""

import dataclasses
import hashlib


@dataclasses.dataclass
class RunConfig:
    # field / model
    triplane_resolution: int = 64
    triplane_channels: int = 24
    feature_split: int = 12
    code_dim: int = 16
    mlp_hidden: int = 48
    sample_grid: int = 32
    samples_coarse: int = 6
    samples_fine: int = 6
    # training
    steps: int = 1200
    batch_size: int = 8
    lr_triplane: float = 1e-2
    lr_mlp: float = 1e-3
    lambda_l1: float = 1.0
    lambda_detail: float = 0.1
    lambda_norm: float = 0.001
    lambda_perc: float = 1.0
    lambda_same_code: float = 0.01
    res_start: int = 32
    res_end: int = 128
    variant: str = "feature_space"  # or "spatial_deformation"
    code_source: str = "ground_truth"  # or "learned_encoder"
    encoder_resolution: int = 32
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 400
    eval_every: int = 100
    holdout_view: int = -1  # -1: last view index held out; -2: none
    background: float = 0.0

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_detail", "lambda_norm", "lambda_perc",
                     "lambda_same_code"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.res_end < self.res_start:
            raise ValueError("resolution schedule must be non-decreasing")
        for r in (self.res_start, self.res_end):
            if r % 8 != 0:
                raise ValueError("render resolutions must be divisible by 8")
        if self.variant not in ("feature_space", "spatial_deformation"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.code_source not in ("ground_truth", "learned_encoder"):
            raise ValueError(f"unknown code source {self.code_source!r}")

    @classmethod
    def paper(cls, **overrides):
        base = dict(triplane_resolution=256, triplane_channels=96,
                    feature_split=48, code_dim=512, mlp_hidden=96,
                    sample_grid=64, samples_coarse=24, samples_fine=24,
                    batch_size=32, lr_triplane=1e-4, lr_mlp=1e-4,
                    res_start=64, res_end=512)
        base.update(overrides)
        return cls(**base)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {ln}: expected key=value, got {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"config line {ln}: unknown key {key!r}")
            ftype = fields[key].type
            name = ftype if isinstance(ftype, str) else ftype.__name__
            if name == "int":
                values[key] = int(val)
            elif name == "float":
                values[key] = float(val)
            elif name == "bool":
                values[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                values[key] = val
        return cls(**values)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]
