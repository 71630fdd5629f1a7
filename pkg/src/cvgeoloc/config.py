"""Tolerances and default hyper-parameters, defined in one place."""

# Numerical tolerances used by tests and the acceptance suite.
OP_GRAD_RTOL = 1e-4
PIPELINE_GRAD_RTOL = 1e-3
SOFTMAX_SUM_ATOL = 1e-12
CONV_ORACLE_ATOL = 1e-12
ATTN_ORACLE_ATOL = 1e-10
MHSAM_ORACLE_ATOL = 1e-10
LOSS_ORACLE_ATOL = 1e-10
FD_EPS = 1e-5

# Clamp applied to sigmoid confidences before taking logs.
BCE_EPS = 1e-7

# Spread of the Gaussian click channel, in query-image pixels.
CLICK_SIGMA = 3.0

# Interaction CABs read the iteration's input pair (both sides update at once).
SIMULTANEOUS_UPDATE = True

DEFAULT_K = 4
DEFAULT_HEADS = 4
DEFAULT_DIM = 256
DEFAULT_EXPANSION = 2
NUM_ANCHORS = 9
BOX_PARAMS = 5  # x, y, w, h, confidence logit

QUERY_SIZE = 64
REFERENCE_SIZE = 128
BACKBONE_CHANNELS = (16, 32, 64)
BACKBONE_STRIDES = (2, 2, 2, 2)

LR = 1e-4
LR_DECAY = 0.1
LR_STEP_EPOCHS = 10
EPOCHS = 30
WEIGHT_DECAY = 0.01
GRAD_CLIP = 10.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Synthetic benchmark recipe (256 train / 64 test pairs, 20 epochs).
BENCH_TRAIN = 256
BENCH_TEST = 64
BENCH_EPOCHS = 20
BENCH_LR = 2e-3
BENCH_LR_STEP = 15
BENCH_BATCH = 4
BENCH_DIM = 64
BENCH_TEST_SEED = 1_000_003

# Overfit checks.
OVERFIT_LR = 5e-4
OVERFIT_STEPS = 200
OVERFIT_LOSS = 0.05
