"""Fixed semantic class palette shared by the simulator, losses, and metrics."""

REGOLITH = 0
ROCK = 1
SKY = 2
ROVER = 3
HUMAN = 4
LANDER = 5

CLASS_COUNT = 6

CLASS_NAMES = ("regolith", "rock", "sky", "rover", "human", "lander")

# Display colors for semantic argmax renders (RGB in [0,1]).
CLASS_COLORS = (
    (0.55, 0.5, 0.45),
    (0.8, 0.25, 0.2),
    (0.05, 0.05, 0.3),
    (0.9, 0.75, 0.1),
    (0.2, 0.8, 0.3),
    (0.3, 0.5, 0.9),
)
