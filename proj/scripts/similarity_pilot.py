#!/usr/bin/env python3
"""Pilot for the acceptance-vs-similarity statistic.

Decodes the toy model (vanilla loop, clustering 2.0) over 20 seeds with
hidden snapshots on every layer, then reports per layer how often a
position's minimum step-to-step cosine similarity lands exactly on its
acceptance iteration. The acceptance suite pins its layer choice and the
0.70 threshold from this table (committed in docs/similarity_pilot.md);
rerun after engine changes with:

    PYTHONPATH=build/python python3 scripts/similarity_pilot.py
"""

import json
import math

import moediff

SEEDS = 20
LAYERS = 4


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return dot / (na * nb)


def run_seed(seed):
    cfg = moediff.ModelConfig()
    cfg.vocab_size = 64
    cfg.hidden_dim = 32
    cfg.num_layers = LAYERS
    cfg.num_experts = 16
    cfg.experts_per_token = 2
    cfg.block_size = 8
    cfg.max_blocks = 2  # matches the acceptance-suite model
    cfg.seed = seed
    cfg.clustering_strength = 2.0

    dec = moediff.DecodeConfig()
    dec.block_size = 8
    dec.max_blocks = 1

    out = moediff.decode(cfg, dec, snapshot_layers=list(range(LAYERS)))
    steps = [json.loads(line) for line in out["traces_jsonl"].splitlines()]
    steps.sort(key=lambda s: (s["iteration"], s["commit"]))

    accepted_at = {}
    for step in steps:
        for a in step["accepted"]:
            accepted_at[a["pos"]] = step["iteration"]

    results = {}
    for layer in range(LAYERS):
        coincident = total = 0
        series = {}
        for i in range(len(steps) - 1):
            cur = steps[i].get("hidden", {}).get(str(layer), {})
            nxt = steps[i + 1].get("hidden", {}).get(str(layer), {})
            for pos, vec in cur.items():
                if pos in nxt:
                    series.setdefault(int(pos), {})[steps[i]["iteration"]] = cosine(
                        vec, nxt[pos]
                    )
        for pos, sims in series.items():
            if len(sims) < 2 or pos not in accepted_at:
                continue
            argmin = min(sorted(sims), key=lambda t: sims[t])
            total += 1
            if argmin == accepted_at[pos]:
                coincident += 1
        results[layer] = (coincident, total)
    return results


def main():
    totals = {layer: [0, 0] for layer in range(LAYERS)}
    for seed in range(1, SEEDS + 1):
        for layer, (c, t) in run_seed(seed).items():
            totals[layer][0] += c
            totals[layer][1] += t
    print(f"seeds: {SEEDS}, toy model 8x4x16 (clustering 2.0), vanilla decode")
    print("layer  coincident/total  ratio")
    for layer, (c, t) in totals.items():
        print(f"{layer:>5}  {c:>10}/{t:<5}  {c / t:.3f}")


if __name__ == "__main__":
    main()
