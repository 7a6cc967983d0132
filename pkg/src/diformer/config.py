"""Flat key = value configuration files.

One namespace for model, training and decoding settings. Unknown keys
are rejected by name; missing keys take the desk-scale defaults. The
rendered form round-trips: parse(render(c)) == c.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .model import ModelConfig


@dataclass
class Config:
    # model
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    l_max: int = 64
    k: int = 16  # max relative distance
    lambda_len: float = 0.1
    dropout: float = 0.1
    pre_ln: bool = False
    # training
    lr: float = 5e-4
    warmup: int = 400
    max_tokens: int = 4096
    steps: int = 3000
    seed: int = 1
    direction_mode: str = "sampled"  # or "fixed-right"
    # decoding
    mode: str = "l2r"
    ar_beam: int = 4
    length_beam: int = 5
    iterations: int = 10
    self_rerank: bool = False

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ffn=self.d_ffn,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            l_max=self.l_max,
            rel_k=self.k,
            lambda_len=self.lambda_len,
            dropout=self.dropout,
            pre_ln=self.pre_ln,
        )


def paper_base() -> Config:
    """The full-scale configuration the architecture was reported with
    (6+6 layers, d_model 512, 8 heads, FFN 2048, k=256, 10k warmup).
    Kept for documentation parity; desk-scale work uses the defaults."""
    return Config(
        d_model=512,
        n_heads=8,
        d_ffn=2048,
        n_enc_layers=6,
        n_dec_layers=6,
        k=256,
        warmup=10000,
        l_max=256,
    )


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_value(key: str, raw: str, typ):
    try:
        if typ is bool:
            return _BOOL[raw.lower()]
        return typ(raw)
    except (ValueError, KeyError):
        raise ValueError(f"bad value for key '{key}': expected {typ.__name__}, got {raw!r}") from None


def parse_config_text(text: str) -> Config:
    types = {f.name: f.type for f in fields(Config)}
    # dataclass field types arrive as strings under future annotations
    py = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key '{key}'")
        typ = types[key]
        if isinstance(typ, str):
            typ = py[typ]
        out[key] = _parse_value(key, raw, typ)
    return Config(**out)


def parse_config(path) -> Config:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def render_config(cfg: Config) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
