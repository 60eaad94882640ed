"""Flat ``key=value`` run configuration: model, training, audio analysis and synthesis settings."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .dsp import DspParams
from .model import ModelConfig, parse_value
from .training import TrainConfig

SYNTH_MODES = ("lin", "mel-exemplar")

# Model fields that follow from the audio settings rather than being set directly.
_DERIVED_MODEL_KEYS = ("l", "d_lin", "n_mels")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dsp: DspParams = field(default_factory=DspParams)
    fps: float = 25.0
    train_fraction: float = 0.8
    synth: str = "lin"
    query_linear: bool = False
    flow_iterations: int = 100

    def __post_init__(self):
        if self.synth not in SYNTH_MODES:
            raise ValueError(f"synth must be one of {SYNTH_MODES}, got {self.synth!r}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        l = self.dsp.frames_per_video_frame(self.fps)
        if l < 1:
            raise ValueError(f"hop {self.dsp.hop_length} is longer than a video frame at {self.fps} fps")
        synced = replace(self.model, l=l, d_lin=self.dsp.n_bins, n_mels=self.dsp.n_mels)
        object.__setattr__(self, "model", synced)

    # ------------------------------------------------------------- presets

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name == "default":
            return cls()
        if name == "mini":
            return cls(model=ModelConfig.mini())
        if name == "tiny":
            # 1.6 kHz audio with a 32-point FFT gives 8 mel and 17 linear bins,
            # two spectrogram frames per 25 fps video frame.
            return cls(
                model=ModelConfig.tiny(),
                train=TrainConfig(max_epochs=60),
                dsp=DspParams(sample_rate=1600, win_length=32, hop_length=32, n_fft=32, n_mels=8, gl_iterations=30),
            )
        raise ValueError(f"unknown preset {name!r}; choose default, mini or tiny")

    # --------------------------------------------------------------- text

    def _sections(self):
        top = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("model", "train", "dsp")}
        model = {f.name: getattr(self.model, f.name) for f in fields(self.model) if f.name not in _DERIVED_MODEL_KEYS}
        train = {f.name: getattr(self.train, f.name) for f in fields(self.train)}
        dsp = {f.name: getattr(self.dsp, f.name) for f in fields(self.dsp)}
        return {"run": top, "model": model, "train": train, "dsp": dsp}

    def to_text(self) -> str:
        lines = []
        for section, vals in self._sections().items():
            lines.append(f"# {section}")
            for k, v in vals.items():
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        """Parse ``key=value`` lines over ``base`` (or a ``preset=`` line, else the default preset)."""
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            pairs.append((lineno, k, v))
        presets = [v for _, k, v in pairs if k == "preset"]
        if base is None:
            base = cls.preset(presets[-1] if presets else "default")
        sections = base._sections()
        owner = {k: sec for sec, vals in sections.items() for k, _ in vals.items()}
        updates: dict[str, dict] = {sec: {} for sec in sections}
        for lineno, k, v in pairs:
            if k == "preset":
                continue
            if k not in owner:
                raise ValueError(f"line {lineno}: unknown config key {k!r}")
            sec = owner[k]
            try:
                updates[sec][k] = parse_value(v, sections[sec][k])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad value for {k}: {exc}") from None
        return cls(
            model=replace(base.model, **updates["model"]),
            train=replace(base.train, **updates["train"]),
            dsp=replace(base.dsp, **updates["dsp"]),
            **{**sections["run"], **updates["run"]},
        )

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), base)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())
