"""Small model factories shared by several test modules."""

import numpy as np

from mse2e.model import ModelConfig, MultiStreamModel, StreamSpec

# CLI-scale run: four utterances, trains in a few seconds
TINY = """# tiny two-stream setup
vocab_size = 4
feat_dim = 6
frames_per_label = 4
jitter = 1
train_utts = 4
test_utts = 3
len_min = 2
len_max = 3
streams = blstm:1:1, blstm:2:1
enc_cells = 12
enc_proj = 12
att_dim = 12
dec_cells = 12
emb_dim = 8
init_scale = 0.5
adadelta_eps = 1e-6
batch_size = 2
epochs = 60
lm_emb_dim = 4
lm_cells = 8
lm_epochs = 5
beam = 4
lm_weight = 0.0
"""


def micro_config(**kw) -> ModelConfig:
    base = dict(n_symbols=2, feat_dim=4, streams=(StreamSpec("blstm", 1, 1), StreamSpec("blstm", 2, 1)),
                enc_cells=3, enc_proj=3, att_dim=3, dec_cells=3, emb_dim=2, init_scale=1.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def micro_model(**kw) -> MultiStreamModel:
    return MultiStreamModel(micro_config(**kw))


def copy_single_into_multi(single: MultiStreamModel, multi: MultiStreamModel) -> None:
    """Give every stream of ``multi`` the encoder/attention/CTC of ``single``'s only stream."""
    src = dict(single.named_parameters())
    for name, p in multi.named_parameters():
        parts = name.split(".")
        if parts[0] in ("encoders", "frame_att", "ctc_heads"):
            parts[1] = "0"
        p.data[...] = src[".".join(parts)].data
