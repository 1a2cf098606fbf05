"""scikit-learn style wrappers around the pipeline stages.

Images go in as sequences of ``(H, W, 3)`` float arrays in ``[0, 1]``;
captions are passed as a keyword argument alongside, the way sklearn passes
``sample_weight``.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_captions, check_image_batch, check_positive_int
from .clipfrontend import FrontendConfig, get_frontend
from .imagecore import downsample_bicubic, jpeg_decode, jpeg_encode, psnr, upsample_bicubic
from .reconstructor import SCALE, ModelConfig, TextRSIRNet, reconstruct
from .trainer import (
    TrainConfig,
    TrainingSample,
    load_checkpoint,
    make_checkpoint,
    save_checkpoint,
    train,
)


def _as_output(images):
    if images and all(im.shape == images[0].shape for im in images):
        return np.stack(images)
    return images


def mean_psnr(predictions, targets):
    values = [psnr(p, t) for p, t in zip(predictions, targets)]
    finite = [v for v in values if np.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


class DownlinkPreparer(TransformerMixin, BaseEstimator):
    """HR image -> decoded compressed low-resolution image, as seen on the ground."""

    def __init__(self, factor=SCALE, quality=75):
        self.factor = factor
        self.quality = quality

    def fit(self, X, y=None):
        check_positive_int(self.factor, "factor")
        return self

    def transform(self, X):
        images = check_image_batch(X)
        out = [jpeg_decode(jpeg_encode(downsample_bicubic(im, self.factor), self.quality))
               for im in images]
        return _as_output(out)


class BicubicUpscaler(BaseEstimator):
    """Bicubic x``factor`` baseline with the same predict/score surface as the model."""

    def __init__(self, factor=SCALE):
        self.factor = factor

    def fit(self, X=None, y=None, captions=None):
        return self

    def predict(self, X, captions=None):
        return _as_output([upsample_bicubic(im, self.factor) for im in check_image_batch(X)])

    def score(self, X, y, captions=None):
        return mean_psnr(list(self.predict(X)), check_image_batch(y, "y"))


class TextRSIRRegressor(BaseEstimator):
    """Text-guided x4 super-resolution of compressed low-resolution images.

    Parameters mirror :class:`~textrsir.reconstructor.ModelConfig` and
    :class:`~textrsir.trainer.TrainConfig`; ``random_state`` seeds both the
    weight initialization and the batch order.

    Attributes
    ----------
    model_ : TextRSIRNet
    frontend_ : ClipFrontend
    loss_trace_ : list of (step, lr, loss)
    checkpoint_ : dict
    """

    def __init__(
        self,
        channels=64,
        num_sr_units=6,
        sr_unit_kind="token_selective",
        alpha_init=0.5,
        hierarchy=True,
        use_sgm=True,
        use_te=True,
        learnable_alpha=True,
        global_skip=True,
        clip_backend="tiny-random",
        epochs=1,
        batch_size=4,
        base_lr=1e-4,
        weight_decay=0.01,
        crop_size=0,
        random_state=0,
        device="cpu",
    ):
        self.channels = channels
        self.num_sr_units = num_sr_units
        self.sr_unit_kind = sr_unit_kind
        self.alpha_init = alpha_init
        self.hierarchy = hierarchy
        self.use_sgm = use_sgm
        self.use_te = use_te
        self.learnable_alpha = learnable_alpha
        self.global_skip = global_skip
        self.clip_backend = clip_backend
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.crop_size = crop_size
        self.random_state = random_state
        self.device = device

    def model_config(self):
        return ModelConfig(
            channels=self.channels,
            num_sr_units=self.num_sr_units,
            sr_unit_kind=self.sr_unit_kind,
            alpha_init=self.alpha_init,
            hierarchy=self.hierarchy,
            use_sgm=self.use_sgm,
            use_te=self.use_te,
            learnable_alpha=self.learnable_alpha,
            global_skip=self.global_skip,
            seed=self.random_state,
        )

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            crop_size=self.crop_size,
            device=self.device,
        )

    def _init_model(self):
        self.frontend_ = get_frontend(FrontendConfig(backend_id=self.clip_backend))
        self.model_ = TextRSIRNet(self.model_config(), self.frontend_.d)
        return self.model_

    def fit(self, X, y, captions=None, ids=None):
        """Train on CLR inputs ``X`` and HR targets ``y``."""
        clrs = check_image_batch(X, "X")
        hrs = check_image_batch(y, "y")
        if len(clrs) != len(hrs):
            raise ValueError(f"X has {len(clrs)} images but y has {len(hrs)}")
        captions = check_captions(captions, len(clrs))
        ids = list(ids) if ids is not None else [str(i) for i in range(len(clrs))]
        samples = [TrainingSample(i, c, h, t) for i, c, h, t in zip(ids, clrs, hrs, captions)]
        net = self._init_model()
        result = train(net, self.frontend_, samples, self.train_config())
        self.loss_trace_ = result.loss_trace
        self.checkpoint_ = result.checkpoint
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit or load")

    def predict(self, X, captions=None):
        self._check_fitted()
        clrs = check_image_batch(X, "X")
        return _as_output(reconstruct(self.model_, self.frontend_, clrs,
                                      check_captions(captions, len(clrs))))

    def score(self, X, y, captions=None):
        """Mean PSNR (dB) of predictions against ``y``, ignoring exact matches."""
        return mean_psnr(list(self.predict(X, captions)), check_image_batch(y, "y"))

    def save(self, path):
        self._check_fitted()
        save_checkpoint(path, getattr(self, "checkpoint_", None) or self._snapshot())

    def _snapshot(self):
        return make_checkpoint(self.model_, self.frontend_.config, self.train_config())

    @classmethod
    def load(cls, path_or_checkpoint):
        """Restore a fitted estimator from a checkpoint file or dict."""
        net, frontend = load_checkpoint(path_or_checkpoint)
        mc = net.config
        est = cls(
            channels=mc.channels,
            num_sr_units=mc.num_sr_units,
            sr_unit_kind=mc.sr_unit_kind,
            alpha_init=mc.alpha_init,
            hierarchy=mc.hierarchy,
            use_sgm=mc.use_sgm,
            use_te=mc.use_te,
            learnable_alpha=mc.learnable_alpha,
            global_skip=mc.global_skip,
            clip_backend=frontend.config.backend_id,
            random_state=mc.seed,
        )
        est.model_ = net
        est.frontend_ = frontend
        return est
