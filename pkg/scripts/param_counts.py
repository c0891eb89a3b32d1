"""Print parameter counts of the full-size models, broken down by top-level component."""

from collections import defaultdict

from nablanet.models import ModelSpec, build_model, count_params


def breakdown(model):
    parts = defaultdict(int)
    for name, t in model.named_parameters():
        parts[name.split(".")[0]] += t.data.size
    return parts


def main():
    specs = [ModelSpec("nabla", v, n) for n in (1, 2, 3, 4) for v in ("A", "B", "AB")]
    specs.append(ModelSpec("irrcnn", input_size=192))
    for spec in specs:
        model = build_model(spec)
        label = f"nabla-{spec.n_decoders} {spec.variant}" if spec.family == "nabla" else "IRRCNN"
        print(f"{label:14s} widths {spec.widths}  total {count_params(model):,}")
        for part, n in breakdown(model).items():
            print(f"    {part:12s} {n:,}")
    print("counted: conv/transposed-conv weights and biases, BN gamma and beta")
    print("not counted: BN running mean/variance buffers; recurrent kernels are shared across steps")


if __name__ == "__main__":
    main()
