"""Named architecture presets.

The public/feed/ads rows are the published per-dataset settings (item
embedding width, shared key/ffwd width, layers, heads, history length).
Under concat fusion the encoder token width is twice ``emb_dim``.
``gpu-paper`` is the large GPU benchmark model; it is provided for
completeness and is not exercised by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig
from .errors import ContractError
from .fusion import FusionMode, token_width


@dataclass(frozen=True)
class Preset:
    name: str
    mode: FusionMode
    emb_dim: int
    key_dim: int
    ffwd_dim: int
    num_layers: int
    num_heads: int
    seq_len: int

    def encoder_config(self, positional: bool = False, **overrides) -> EncoderConfig:
        mode = FusionMode.parse(overrides.pop("mode", self.mode))
        emb_dim = overrides.pop("emb_dim", self.emb_dim)
        fields = {
            "token_dim": token_width(emb_dim, mode),
            "key_dim": self.key_dim,
            "ffwd_dim": self.ffwd_dim,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "max_seq_len": self.seq_len + 1,
            "positional": positional,
        }
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return EncoderConfig(**fields)


_APPEND, _CONCAT = FusionMode.APPEND_CROSS, FusionMode.CONCAT

PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("public-append", _APPEND, 16, 24, 24, 2, 1, 50),
        Preset("public-concat", _CONCAT, 16, 16, 16, 2, 1, 50),
        Preset("feed-append", _APPEND, 54, 40, 40, 2, 1, 48),
        Preset("feed-concat", _CONCAT, 104, 24, 24, 2, 1, 48),
        Preset("ads-append", _APPEND, 24, 32, 32, 1, 4, 20),
        Preset("ads-concat", _CONCAT, 40, 16, 16, 1, 4, 20),
        Preset("gpu-paper", _APPEND, 512, 64, 64, 8, 1, 1024),
    )
}

ALIASES = {"public": "public-append", "feed": "feed-append", "ads": "ads-append"}

# (append preset, concat preset) per dataset row
PRESET_PAIRS = {
    "public": ("public-append", "public-concat"),
    "feed": ("feed-append", "feed-concat"),
    "ads": ("ads-append", "ads-concat"),
}


def get_preset(name: str) -> Preset:
    key = ALIASES.get(name, name)
    if key not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS) + sorted(ALIASES)}")
    return PRESETS[key]
