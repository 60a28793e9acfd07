"""Regenerate src/clipag/assets/bpe_vocab_v1.json.

The merges are learned from a small frequency-weighted English word list plus
the toy-corpus vocabulary. Output is deterministic; bump the version in the
file name whenever the word list changes.
"""

import json
from collections import Counter
from pathlib import Path

from clipag.tokenizer import learn_merges
from clipag.toydata import COLORS, SHAPES, BACKGROUNDS, PROMPT_PREFIXES

COMMON = """
a an the of and to in on with for at by from is are was be not no this that it its as or
photo picture image drawing painting oil pencil graffiti childish cartoon sketch render art
style of artistic realistic abstract colorful bright dark light small large big tiny huge
cat dog bird parrot monkey car cars horse cow sheep fish tree trees flower flowers house
town tower city street road river lake sea ocean beach mountain mountains sky cloud clouds
sun moon star stars night day morning evening snow rain forest field garden park bridge
man woman person people child children boy girl family friends group crowd player team
table chair bed room kitchen window door wall floor building church castle boat ship train
plane airplane bus truck bicycle motorcycle food pizza cake fruit apple banana orange bowl
plate cup glass bottle book books computer phone television clock lamp sign street light
standing sitting walking running flying swimming playing eating holding looking riding
near next under over above behind front top bottom side left right middle center background
red green blue yellow purple pink white black gray grey brown orange cyan magenta gold
circle square triangle cross ring line lines shape shapes pattern texture stripes dots
magical fiesta beautiful old new happy sad colorful wooden metal stone glass shiny
"""


def main():
    counts = Counter()
    for w in COMMON.split():
        counts[w] += 3
    for name in list(COLORS) + list(SHAPES) + list(BACKGROUNDS):
        counts[name] += 20
    for prefix in PROMPT_PREFIXES:
        for w in prefix.split():
            counts[w] += 5
    merges = learn_merges(dict(counts), num_merges=1200, min_count=2)
    out = Path(__file__).resolve().parents[1] / "src" / "clipag" / "assets" / "bpe_vocab_v1.json"
    out.write_text(json.dumps({"version": 1, "merges": merges}, indent=0))
    print(f"wrote {len(merges)} merges to {out}")


if __name__ == "__main__":
    main()
