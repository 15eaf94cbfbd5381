"""Audio-visual target speaker extraction with a speaker-identity memory bank.

Library layout:
  numerics   dense float32 arrays + tape-based reverse-mode gradients
  model      encoder/decoder, visual adapter, refinement blocks, attention fusion
  momentum   the anchor-embedding memory bank and its update policy
  streaming  online sliding-window inference engine
  training   losses, two-pass segment training, Adam + plateau schedule
  datasim    mixture/visual-feature simulation, impairments, metrics
  fileio     WAV, checkpoint, feature-file and run-config formats
  cli        command-line front end
"""

__version__ = "0.1.0"
