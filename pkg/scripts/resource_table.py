"""Feedthrough and DAC-channel counts for static trees and routed dynamic demuxes."""

from tdmvolt.metrics import resource_comparison
from tdmvolt.model import DynamicRouting
from tdmvolt.presets import dynamic_config, static_config

rows = [
    ("static 1x4", static_config(stage1_outputs=1, stage2_outputs=4)),
    ("static 4x8", static_config()),
    ("static 8x8 single-step", static_config(stage1_outputs=8, two_step=False)),
    ("dynamic 4", dynamic_config()),
    ("dynamic 4 x 8 zones", dynamic_config(routing=DynamicRouting(4, 8))),
]
print(f"{'board':<24}{'electrodes':>11}{'lines TDM':>11}{'lines conv':>11}{'DACs TDM':>10}{'DACs conv':>11}")
for name, cfg in rows:
    r = resource_comparison(cfg)
    print(f"{name:<24}{cfg.electrode_count:>11}{r.feedthroughs_tdm:>11}{r.feedthroughs_conventional:>11}"
          f"{r.dac_channels_tdm:>10}{r.dac_channels_conventional:>11}")
