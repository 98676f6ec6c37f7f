"""scikit-learn style wrappers around the conditioning, training and cleaning code."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .conditioning import ConditionSources, DropoutConfig, encode_text_stub, select_tokens
from .data_pipeline import GENERATION_TASKS, CleaningConfig, run_cleaning
from .dit import DiTConfig, ExpertRouter, init_dit_params
from .exceptions import RejectedInputError
from .flow import SamplerConfig, TrainingExample, euler_sample, init_optim, train_step
from .latents import PixelLatentEncoder
from .prompt_reasoner import default_reasoner
from .tensor_core import Rng, mix_seed


class ConditionEncoder(TransformerMixin, BaseEstimator):
    """Turn :class:`UnifiedSample` records into unprojected condition sources.

    ``fit`` builds the fixed latent stand-in and resolves the reasoner; no
    statistics are learned from ``X``.
    """

    def __init__(self, d_mllm=16, d_txt=16, budget=16, strategy="uniform_visual",
                 latent_patch=4, latent_channels=4, reasoner=None):
        self.d_mllm = d_mllm
        self.d_txt = d_txt
        self.budget = budget
        self.strategy = strategy
        self.latent_patch = latent_patch
        self.latent_channels = latent_channels
        self.reasoner = reasoner

    def fit(self, X=None, y=None):
        self.latent_encoder_ = PixelLatentEncoder(self.latent_patch, self.latent_channels)
        self.reasoner_ = self.reasoner or default_reasoner()
        return self

    def encode_one(self, sample):
        check_is_fitted(self, "latent_encoder_")
        src = sample.source_or_empty()
        instr = sample.instruction
        feats = self.reasoner_.interaction_features(src, instr, self.d_mllm)
        h = select_tokens(feats.tokens, self.budget, self.strategy, feats.text_token_count)
        caption = sample.target_caption or self.reasoner_.target_caption(src, instr)
        tgt = encode_text_stub(caption.text, self.d_txt).tokens
        if sample.task in GENERATION_TASKS:
            edit = np.zeros((0, self.d_txt))
            ref = np.zeros((0, 1, 1, self.latent_channels))
        else:
            edit = encode_text_stub(instr.text, self.d_txt).tokens
            ref = self.latent_encoder_.encode(sample.source_payload.decode())
        return ConditionSources(h, tgt, edit, ref)

    def encode_target(self, sample):
        check_is_fitted(self, "latent_encoder_")
        return self.latent_encoder_.encode(sample.target.decode())

    def transform(self, X):
        return [self.encode_one(s) for s in X]

    def examples(self, samples):
        return [TrainingExample(self.encode_target(s), self.encode_one(s), s.id) for s in samples]


class FlowMatchingGenerator(BaseEstimator):
    """Two-expert flow-matching generator trained with Adam.

    ``fit(X, y)`` takes a list of :class:`ConditionSources` and matching target
    latents of identical shape; ``fit_stream`` consumes batches of
    :class:`TrainingExample` from any iterator.
    """

    def __init__(self, model=None, dropout=None, u_threshold=0.5, learning_rate=1e-3,
                 n_steps=2000, batch_size=16, sampler_steps=64, seed=0):
        self.model = model
        self.dropout = dropout
        self.u_threshold = u_threshold
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.sampler_steps = sampler_steps
        self.seed = seed

    def _init(self):
        cfg = self.model or DiTConfig()
        root = Rng(mix_seed("generator", self.seed))
        self.router_ = ExpertRouter(init_dit_params(cfg, root.spawn("low")),
                                    init_dit_params(cfg, root.spawn("high")), self.u_threshold)
        self.optims_ = {k: init_optim(p, lr=self.learning_rate)
                        for k, p in self.router_.experts().items()}
        self.rng_ = root.spawn("train")
        self.loss_curve_ = []
        self.step_results_ = []

    def fit(self, X, y):
        if len(X) != len(y) or not len(X):
            raise RejectedInputError("X and y must be nonempty and of equal length")
        y = [np.asarray(z, dtype=np.float64) for z in y]
        examples = [TrainingExample(z, s) for s, z in zip(X, y)]
        self._init()
        draw = self.rng_.spawn("batches")

        def batches():
            while True:
                idx = draw.integers(len(examples), size=self.batch_size)
                yield [examples[i] for i in idx]

        return self._train(batches())

    def fit_stream(self, batches):
        self._init()
        return self._train(iter(batches))

    def _train(self, batches):
        dropout = self.dropout or DropoutConfig()
        for _ in range(self.n_steps):
            batch = next(batches)
            res = train_step(batch, self.router_, self.optims_, self.rng_, dropout)
            self.loss_curve_.append(res.loss)
            self.step_results_.append(res)
        return self

    def sample(self, sources, grid_shape, n_samples=1, zero_segments=(), seed=0):
        check_is_fitted(self, "router_")
        rng = Rng(mix_seed("sample", self.seed, seed))
        return euler_sample(sources, self.router_, SamplerConfig(self.sampler_steps), rng,
                            grid_shape, n_samples, zero_segments)

    def predict(self, X, grid_shape, n_samples=16):
        """Monte Carlo mean latent for each condition in ``X``."""
        return np.stack([self.sample(s, grid_shape, n_samples, seed=i).mean(axis=0)
                         for i, s in enumerate(X)])

    def score(self, X, y, n_samples=16):
        """Negative mean absolute error between predicted means and ``y``."""
        y = np.stack([np.asarray(z, dtype=np.float64) for z in y])
        pred = self.predict(X, y.shape[1:4], n_samples)
        return -float(np.mean(np.abs(pred - y)))


class CleaningPipeline(TransformerMixin, BaseEstimator):
    """Four-stage cleaning as a transformer; the last report is kept in ``report_``."""

    def __init__(self, config=None, reasoner=None):
        self.config = config
        self.reasoner = reasoner

    def fit(self, X=None, y=None):
        self.config_ = self.config or CleaningConfig()
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        kept, self.report_ = run_cleaning(X, self.config_, self.reasoner)
        return kept
