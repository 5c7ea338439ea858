from .rimformer.rimformer import ModelConfig, rimformer_forward, count_parameters
