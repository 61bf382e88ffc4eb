"""miaaudit - membership-inference audit toolkit.

White-box attack on a gaze-regression target model, separating frame
memorization from face memorization.
"""

__version__ = "0.1.0"
