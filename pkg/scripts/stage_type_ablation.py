"""Parameters and FLOPs of the five stage-type assignments at UniFormer-S size (image and video)."""

from dataclasses import replace

from uniformer_kit.analyzer import count_macs
from uniformer_kit.config import STAGE_TYPE_PRESETS, preset


def main():
    base = preset("S")
    print(f"{'types':>6} {'params M':>9} {'image G':>9} {'video-16 G':>11}")
    for name in STAGE_TYPE_PRESETS:
        stages = tuple(replace(s, stage_type=t) for s, t in zip(base.stages, name))
        img = replace(base, stages=stages)
        vid = replace(img, input_spec=(3, 16, 224, 224), video=True, local_kernel=None, dpe_kernel=None)
        r_img, r_vid = count_macs(img), count_macs(vid)
        print(f"{name:>6} {r_img.total_params / 1e6:>9.2f} {r_img.total_macs / 1e9:>9.2f} {r_vid.total_macs / 1e9:>11.2f}")


if __name__ == "__main__":
    main()
