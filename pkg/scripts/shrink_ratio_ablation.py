"""Lightweight-model FLOPs across hourglass shrink ratios and resolutions."""

from uniformer_kit.analyzer import count_macs
from uniformer_kit.config import preset


def main():
    print(f"{'model':>5} {'res':>5} " + " ".join(f"r={r:<5}" for r in (0.25, 0.5, 0.75, 1.0)))
    for name in ("XXS", "XS"):
        for res in (128, 160, 192, 224):
            cells = []
            for ratio in (0.25, 0.5, 0.75, 1.0):
                macs = count_macs(preset(name, shrink_ratio=ratio), (3, 1, res, res)).total_macs
                cells.append(f"{macs / 1e9:<7.3f}")
            print(f"{name:>5} {res:>5} " + " ".join(cells))
    base = count_macs(preset("XXS", shrink_ratio=1.0), (3, 1, 160, 160)).total_macs
    half = count_macs(preset("XXS", shrink_ratio=0.5), (3, 1, 160, 160)).total_macs
    print(f"XXS@160 saving of ratio 0.5 over 1.0: {100 * (1 - half / base):.1f}%")


if __name__ == "__main__":
    main()
