"""Parameter and multiply-accumulate counts of the default network and its toy variants."""

import argparse

from vod.backbone import ExpansionConfig, build_network, count_flops, count_parameters

REF_PARAMS = 3.76e6
REF_FLOPS = 1.96e9


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--toy-scales", type=float, nargs="+", default=[1.0, 0.5, 0.25])
    args = ap.parse_args()
    frames, side = ExpansionConfig().clip_shape()
    print(f"native clip {frames}x{side}x{side}")
    print("toy_scale  head_dim  params      vs 3.76M  GMACs {0}x{1}²  vs 1.96G  GMACs 16x224²".format(frames, side))
    for scale in args.toy_scales:
        for head_dim in (None, 2):
            if head_dim == 2 and scale != 1.0:
                continue
            net = build_network(toy_scale=scale, head_dim=head_dim)
            p = count_parameters(net)
            f = count_flops(net.spec, frames, side)
            big = count_flops(net.spec, 16, 224)
            print(f"{scale:9.2f}  {str(net.spec.head_dim):8s}  {p:10,d}  {p / REF_PARAMS - 1:+8.1%}  "
                  f"{f / 1e9:12.3f}  {f / REF_FLOPS - 1:+8.1%}  {big / 1e9:12.3f}")


if __name__ == "__main__":
    main()
