"""Language-guided in-context emotion recognition.

A vision transformer encodes the image (or video frames), a language
model's scene description is tokenized and embedded, and a query
transformer fuses the two streams into a compact representation that a
linear head turns into emotion scores.
"""

__version__ = "0.1.0"
