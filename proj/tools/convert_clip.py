#!/usr/bin/env python3
"""Convert an OpenAI CLIP ViT state dict into a vsla checkpoint of backbone weights.

Reads a torch state dict (.pt/.pth, plain or TorchScript) or an .npz of the same
keys. Writes image and text backbone tensors that `pretrained` in the run config
can point at. The image positional embedding is resized when the target input
size gives a different patch grid.

    python tools/convert_clip.py ViT-B-16.pt clip_b16.ckpt --height 256 --width 128
"""

import argparse
import json
import sys

import numpy as np

SOT, EOT, PAD = 49406, 49407, 0


def load_state_dict(path):
    if path.endswith(".npz"):
        with np.load(path) as z:
            return {k: np.asarray(z[k], dtype=np.float64) for k in z.files}
    import torch

    try:
        sd = torch.jit.load(path, map_location="cpu").state_dict()
    except RuntimeError:
        sd = torch.load(path, map_location="cpu")
    if "state_dict" in sd:
        sd = sd["state_dict"]
    return {k: v.detach().double().numpy() for k, v in sd.items()}


def resize_grid(pos, old_hw, new_hw):
    """Bicubic resize of a (1 + gh*gw) x D positional table, class row kept."""
    if old_hw == new_hw:
        return pos
    import torch
    import torch.nn.functional as F

    cls, grid = pos[:1], pos[1:]
    d = grid.shape[1]
    g = torch.from_numpy(grid.reshape(old_hw[0], old_hw[1], d)).permute(2, 0, 1)[None]
    g = F.interpolate(g, size=new_hw, mode="bicubic", align_corners=False)
    grid = g[0].permute(1, 2, 0).reshape(new_hw[0] * new_hw[1], d).numpy()
    return np.concatenate([cls, grid], axis=0)


def row(v):
    return np.asarray(v, dtype=np.float64).reshape(1, -1)


def block(sd, src, dst, out, group):
    out[f"{dst}.ln_1.weight"] = (group, row(sd[f"{src}.ln_1.weight"]))
    out[f"{dst}.ln_1.bias"] = (group, row(sd[f"{src}.ln_1.bias"]))
    out[f"{dst}.attn.in_proj.weight"] = (group, sd[f"{src}.attn.in_proj_weight"].T)
    out[f"{dst}.attn.in_proj.bias"] = (group, row(sd[f"{src}.attn.in_proj_bias"]))
    out[f"{dst}.attn.out_proj.weight"] = (group, sd[f"{src}.attn.out_proj.weight"].T)
    out[f"{dst}.attn.out_proj.bias"] = (group, row(sd[f"{src}.attn.out_proj.bias"]))
    out[f"{dst}.ln_2.weight"] = (group, row(sd[f"{src}.ln_2.weight"]))
    out[f"{dst}.ln_2.bias"] = (group, row(sd[f"{src}.ln_2.bias"]))
    for lin in ("c_fc", "c_proj"):
        out[f"{dst}.mlp.{lin}.weight"] = (group, sd[f"{src}.mlp.{lin}.weight"].T)
        out[f"{dst}.mlp.{lin}.bias"] = (group, row(sd[f"{src}.mlp.{lin}.bias"]))


def count_blocks(sd, prefix):
    ids = {int(k[len(prefix):].split(".")[0]) for k in sd if k.startswith(prefix)}
    if ids != set(range(len(ids))):
        raise ValueError(f"non-contiguous block indices under {prefix}")
    return len(ids)


def convert(sd, height, width, context_length):
    out = {}
    w = sd["visual.conv1.weight"]
    if w.ndim != 4 or w.shape[1] != 3 or w.shape[2] != w.shape[3]:
        raise ValueError(f"visual.conv1.weight has unexpected shape {w.shape}")
    d, ps = w.shape[0], w.shape[2]
    if height % ps or width % ps:
        raise ValueError(f"input {height}x{width} is not a multiple of the patch size {ps}")
    pos = sd["visual.positional_embedding"]
    old = int(round((pos.shape[0] - 1) ** 0.5))
    if old * old + 1 != pos.shape[0]:
        raise ValueError("source positional embedding is not a square grid plus a class token")

    bb, tb = "backbone", "text_backbone"
    out["visual.conv1.weight"] = (bb, w.reshape(d, -1).T)
    out["visual.class_embedding"] = (bb, row(sd["visual.class_embedding"]))
    out["visual.positional_embedding"] = (bb, resize_grid(pos, (old, old), (height // ps, width // ps)))
    for ln in ("ln_pre", "ln_post"):
        out[f"visual.{ln}.weight"] = (bb, row(sd[f"visual.{ln}.weight"]))
        out[f"visual.{ln}.bias"] = (bb, row(sd[f"visual.{ln}.bias"]))
    out["visual.proj"] = (bb, sd["visual.proj"])
    for k in range(count_blocks(sd, "visual.transformer.resblocks.")):
        block(sd, f"visual.transformer.resblocks.{k}", f"visual.blocks.{k}", out, bb)

    tok = sd["token_embedding.weight"]
    out["text.token_embedding"] = (tb, tok[[SOT, EOT, PAD]])
    tpos = sd["positional_embedding"]
    if context_length > tpos.shape[0]:
        raise ValueError(f"context length {context_length} exceeds the source's {tpos.shape[0]}")
    out["text.positional_embedding"] = (tb, tpos[:context_length])
    for k in range(count_blocks(sd, "transformer.resblocks.")):
        block(sd, f"transformer.resblocks.{k}", f"text.blocks.{k}", out, tb)
    out["text.ln_final.weight"] = (tb, row(sd["ln_final.weight"]))
    out["text.ln_final.bias"] = (tb, row(sd["ln_final.bias"]))
    out["text.projection"] = (tb, sd["text_projection"])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help="CLIP state dict (.pt, .pth or .npz)")
    ap.add_argument("output", help="checkpoint to write")
    ap.add_argument("--height", type=int, default=256)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--context-length", type=int, default=77)
    args = ap.parse_args(argv)
    try:
        tensors = convert(load_state_dict(args.source), args.height, args.width, args.context_length)
    except (KeyError, ValueError) as e:
        print(f"convert_clip: {e}", file=sys.stderr)
        return 2
    meta = {"source": "clip", "image_size": [args.height, args.width], "context_length": args.context_length}
    from vsla_reid import save_checkpoint_tensors

    entries = [(name, group, m) for name, (group, m) in sorted(tensors.items())]
    save_checkpoint_tensors(args.output, entries, json.dumps(meta))
    print(f"wrote {len(tensors)} tensors to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
