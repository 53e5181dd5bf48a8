"""Speech emotion recognition by attention fusion of deep, pitch and MFCC features,
plus session-level emotion-trend analytics."""

__version__ = "0.1.0"
