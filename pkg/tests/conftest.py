import numpy as np
import pytest

from dmch.decoder import AttentionDecoder, Vocabulary, init_decoder_params
from dmch.encoder import make_grid

TOY_TOKENS = ["red", "blue", "green", "dress", "shirt"]


def tiny_decoder(seed=0, hidden=6, embed=5, grid=(3, 3), tokens=TOY_TOKENS, scale=1.0):
    vocab = Vocabulary(tokens)
    params = init_decoder_params(np.random.default_rng(seed), len(vocab), embed, hidden, grid[0] * grid[1])
    if scale != 1.0:
        for p in params.values():
            p.data *= scale
    return AttentionDecoder(params, vocab)


def random_grid(batch=2, hidden=6, grid=(3, 3), seed=1):
    regions = np.random.default_rng(seed).normal(size=(batch, grid[0] * grid[1], hidden))
    return make_grid(regions, *grid)


@pytest.fixture
def decoder():
    return tiny_decoder()


def shrink_images(manifest, size=16):
    """Downsample every image of a generated manifest in place."""
    from PIL import Image

    for r in manifest.records:
        path = manifest.resolve(r)
        with Image.open(path) as im:
            small = im.convert("RGB").resize((size, size), Image.BOX)
        small.save(path)
    return manifest


def tiny_config(**overrides):
    from dmch.model import TrainConfig

    base = dict(hidden=8, embed_dim=4, conv_channels=(4,), image_size=16, code_bits=16,
                batch_size=4, neg_ratio=1, lr=0.01, max_epochs=3, stage_epoch_cap=2,
                max_decode_len=6)
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    from dmch.synth import generate

    m = generate(4, 2, seed=3, out_dir=tmp_path_factory.mktemp("toy"))
    return shrink_images(m)


def overfit_tag_loss(model, images, sequences, lr=0.05, max_steps=200, target=0.1):
    """Fit the attribute decoder (and encoder) to a handful of images with the
    tag loss alone. Returns (steps taken, final loss)."""
    from dmch import autodiff as ad
    from dmch.trainer import SGDMomentum, clip_grad_norm

    params = {k: p for k, p in model.params.items() if k != "emb.W_e"}
    opt = SGDMomentum(params, 0.9)
    for step in range(max_steps + 1):
        loss, _ = model.forward(images, sequences)
        if float(loss.data) < target or step == max_steps:
            return step, float(loss.data)
        ad.backward(loss)
        clip_grad_norm(params.values(), 5.0)
        opt.step(lr)


def overfit_config(**overrides):
    return tiny_config(**{**dict(hidden=16, embed_dim=8, conv_channels=(16, 16), image_size=64),
                          **overrides})


CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    CRITERIA[number] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
