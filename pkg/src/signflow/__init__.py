"""signflow: two-way sign language translation engine.

Recognition side: a tiny residual video classifier with temporal-shift or
excitation-gate temporal modules, TSN-style segment sampling, and a cached
one-way shift path for streaming inference. Generation side: lexicon
segmentation, natural-to-statute order rules, and gloss-to-clip video
assembly.
"""

__version__ = "0.1.0"
