#!/usr/bin/env python3
"""Regenerate the shipped BPE merge table from the embedded seed corpus.

The corpus is a small pile of caption-like English covering the phrasing the
models see: color/shape vocabulary, attribute prompts, and generic scene
descriptions.  254 merges keep the total vocabulary at 512 ids
(256 bytes + 254 merges + 2 specials).
"""

import argparse
import pathlib

from grain.tokenizer import Tokenizer, train_merges

SEED_CORPUS = """
a photo of a cat sitting on a wooden table near the window
a photo of a dog running through tall green grass in a park
a small red square marker on a plain gray background
a small blue circle marker near the center of the image
a small green triangle marker in the lower left corner
a small yellow ring marker on a dark field
a purple square and an orange circle on a white background
a cyan triangle beside a white ring marker
the primary visual subject in this image is a striped tabby cat
distinguishing visual features include pointed ears and green eyes
which has a long bushy tail and short brown fur
which has a round body with small colored patches
describe this image in one line
a close up view of a bird with a bright orange beak
two people walking along a sandy beach at sunset
an airplane flying above a layer of white clouds
a bowl of fresh fruit including apples and bananas on a counter
a city street at night with cars and bright neon signs
the quick brown fox jumps over the lazy dog
numbers zero one two three four five six seven eight nine ten
synthetic scene 001 with a small marker on a plain background
synthetic scene 002 with a small marker on a plain background
view 003: one small colored marker on a gray field
a photo of a red square, which is a small red square marker
a photo of a blue circle, which is a small blue circle marker
this is a picture of a flower with white petals and a yellow center
a group of children playing football on a grassy field
a man riding a bicycle down a narrow cobblestone street
a woman holding an umbrella in the rain outside a cafe
a plate of pasta with tomato sauce and grated cheese
a mountain landscape with snow covered peaks and a clear blue sky
a train arriving at a crowded station platform in the morning
a wooden boat floating on a calm lake surrounded by trees
the side mirror of a parked motorcycle reflecting the street
a laptop computer and a cup of coffee on an office desk
a bookshelf filled with old books and small potted plants
a horse grazing in a fenced meadow near an old barn
a slice of chocolate cake with a strawberry on a white plate
a traffic light turning green at an empty intersection
an orange cat sleeping on a colorful woven rug
the colorful marker is located near the top right corner
the marker appears in the lower right region of the scene
bounding boxes are given as center coordinates with width and height
regions are matched to descriptions by visual similarity
a small white square marker above a small purple ring marker
"""

DEFAULT_NUM_MERGES = 254


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--num-merges", type=int, default=DEFAULT_NUM_MERGES)
    parser.add_argument(
        "--out",
        type=pathlib.Path,
        default=pathlib.Path(__file__).resolve().parents[1]
        / "src"
        / "grain"
        / "assets"
        / "bpe_merges.json",
    )
    args = parser.parse_args()

    merges = train_merges(SEED_CORPUS.strip().splitlines(), args.num_merges)
    tok = Tokenizer(merges)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    tok.save(args.out)
    print(f"wrote {len(merges)} merges -> {args.out} (vocab_size={tok.vocab_size}, id={tok.identifier})")


if __name__ == "__main__":
    main()
