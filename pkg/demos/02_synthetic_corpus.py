"""Generating a synthetic action-sequence corpus with known ground truth.

Two goals own disjoint action templates; every template position carries
lognormal gap parameters, so the median time between actions is known
exactly. A swap probability injects mild order noise. The script prints
summary statistics that confirm the generator matches its own spec, then
writes the corpus as JSONL next to this file.
"""

import math
import os
from collections import Counter

import numpy as np

from actionflow.data import median_gap
from actionflow.synth import GoalTemplate, SynthSpec, generate
from actionflow.data import write_corpus

OUT = os.path.join(os.path.dirname(__file__), "demo_corpus.jsonl")


def main():
    spec = SynthSpec(
        goals=[
            GoalTemplate(
                name="brew_coffee",
                template=["grind", "heat", "pour", "press"],
                mu=[0.0, math.log(3.0), 0.0, math.log(2.0)],
                sigma=[0.25, 0.25, 0.25, 0.25],
                swap_pairs=[(0, 1)],
            ),
            GoalTemplate(
                name="make_tea",
                template=["boil", "steep", "strain", "serve"],
                mu=[math.log(2.0), math.log(5.0), 0.0, 0.0],
                sigma=[0.25, 0.25, 0.25, 0.25],
            ),
        ],
        count=400,
        seed=11,
        swap_prob=0.2,
    )
    corpus, vocab = generate(spec)

    print(f"generated {len(corpus)} sequences, "
          f"{vocab.n_marks} marks, {vocab.n_goals} goals")
    goals = Counter(vocab.goal_names[s.goal] for s in corpus)
    print(f"goal balance: {dict(goals)}")
    print(f"median inter-action gap: {median_gap(corpus):.3f}")

    # per-mark gap medians should sit near the spec's e^mu values
    print("\nobserved median gap after each mark (vs ground truth):")
    truth = {}
    for goal in spec.goals:
        for mark, mu in zip(goal.template, goal.mu):
            truth[mark] = math.exp(mu)
    gaps: dict[str, list[float]] = {}
    for seq in corpus:
        times = seq.times()
        for i, action in enumerate(seq.actions[:-1]):
            name = vocab.mark_name(action.mark)
            gaps.setdefault(name, []).append(times[i + 1] - times[i])
    for name in sorted(gaps):
        observed = float(np.median(gaps[name]))
        print(f"  {name:>7}: observed {observed:5.2f}  truth {truth[name]:5.2f}")

    first_two = [tuple(vocab.mark_name(a.mark) for a in s.actions[:2])
                 for s in corpus if vocab.goal_names[s.goal] == "brew_coffee"]
    swapped = sum(1 for pair in first_two if pair == ("heat", "grind"))
    print(f"\nswap noise: {swapped}/{len(first_two)} coffee sequences start "
          f"heat-before-grind (expect about 20%)")

    write_corpus(corpus, vocab, OUT)
    print(f"\nwrote {OUT}")


if __name__ == "__main__":
    main()
