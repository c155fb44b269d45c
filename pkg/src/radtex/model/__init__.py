from .backbone import Backbone, BackboneConfig
from .checkpoint import (CheckpointFormatError, load_backbone, load_checkpoint, read_records,
                         save_checkpoint)
from .layers import Module
from .captioner import (ClassifierModel, ModelConfig, CaptioningModel, TextualHeadConfig, caption_loss,
                     classify, decoder_forward, encode_image, reverse_tokens, transplant_backbone)

__all__ = [
    "Backbone", "BackboneConfig", "CheckpointFormatError", "ClassifierModel", "ModelConfig", "Module",
    "CaptioningModel", "TextualHeadConfig", "caption_loss", "classify", "decoder_forward", "encode_image",
    "load_backbone", "load_checkpoint", "read_records", "reverse_tokens", "save_checkpoint",
    "transplant_backbone",
]
