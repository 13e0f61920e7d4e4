"""Binary hashing of whole sets of feature vectors.

A set is summarised by permutation-invariant statistics and a VLAD
encoding against a k-means codebook, mapped through a small network to a
real code, and thresholded into bits that are searched by Hamming
distance.
"""

from .dataset import Dataset, ImageSet, expand_sets, load_dataset, save_dataset, synth_dataset
from .dictionary import Dictionary, kmeans_fit, load_dictionary, save_dictionary
from .hashnet import HashNet, load_model, save_model
from .retrieval import BinaryCode, HammingIndex, encode_set, hamming, mean_average_precision, query
from .setfeat import SetFeature, aggregate
from .trainer import TrainConfig, grad_check, train

__version__ = "0.1.0"

__all__ = [
    "BinaryCode",
    "Dataset",
    "Dictionary",
    "HammingIndex",
    "HashNet",
    "ImageSet",
    "SetFeature",
    "TrainConfig",
    "aggregate",
    "encode_set",
    "expand_sets",
    "grad_check",
    "hamming",
    "kmeans_fit",
    "load_dataset",
    "load_dictionary",
    "load_model",
    "mean_average_precision",
    "query",
    "save_dataset",
    "save_dictionary",
    "save_model",
    "synth_dataset",
    "train",
]
