"""Parameter and multiply-accumulate counts for a few width settings."""

from hdrjoint.models import ModelConfig, init_weights, param_stats

SETTINGS = {
    "default": ModelConfig(),
    "narrow": ModelConfig(denoiser_hidden=(16,) * 4, tonemap_width=32, cond_widths=(8, 16, 32)),
    "wide": ModelConfig(denoiser_hidden=(64,) * 4, tonemap_width=128, cond_widths=(32, 64, 128)),
}

if __name__ == "__main__":
    print(f"{'setting':10s} {'params':>10s} {'MACs/224 patch':>16s} {'tone-map MACs':>14s} {'denoise MACs':>14s}")
    for name, cfg in SETTINGS.items():
        st = param_stats(init_weights(0, cfg))
        print(f"{name:10s} {st.params:10d} {st.macs_per_patch:16d} {st.tonemapper_macs:14d} {st.denoiser_macs:14d}")
