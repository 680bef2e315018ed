"""Self-play few-shot pool construction and mixed-shot aggregation for VQA.

The engine turns labeled VQA training sets into self-play environments: a
generator model writes programs that answer questions about images
(optionally calling a tool model through an indirection API), failed runs
are self-refined, correct runs are promoted into few-shot pools across
training steps, and multiple pools are combined at inference time by
majority vote, judge ranking, or an oracle upper bound.
"""

__version__ = "0.1.0"
