"""Cross-view object geo-localization with cross-view cross-attention.

Subpackages and modules:

* :mod:`cvgeoloc.numerics`   -- numpy tensors with a reverse-mode gradient tape
* :mod:`cvgeoloc.encoding`   -- 2D sine positional encoding, click channel
* :mod:`cvgeoloc.attention`  -- cross-attention block and CVCAM
* :mod:`cvgeoloc.mhsam`      -- multi-head spatial attention gate
* :mod:`cvgeoloc.detection`  -- anchors, box coding, losses, box selection
* :mod:`cvgeoloc.model`      -- full pipeline and checkpoints
* :mod:`cvgeoloc.train`      -- optimizer, training loop, inference
* :mod:`cvgeoloc.dataset`    -- annotations and synthetic data
* :mod:`cvgeoloc.evaluation` -- IoU, accu@t, reports
* :mod:`cvgeoloc.cli`        -- ``cvgeoloc`` command
"""

__version__ = "0.1.0"
