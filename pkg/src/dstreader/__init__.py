"""Dialog state tracking that reads the conversation as a passage.

Per turn and slot the tracker makes three sequential decisions: keep or
change the previous value, what kind of value it is (yes / no / dontcare /
span), and where the span sits in the flattened dialog.  A closed-vocabulary
baseline, probability-averaged ensembling, and a per-slot hybrid combiner
sit alongside, plus evaluation and ablation tooling.
"""

__version__ = "0.1.0"
