from pathlib import Path

import pytest

from lrfr.config import EXAMPLE, ConfigError, load_config, parse_config
from lrfr.imageops import AugmentationPlan

ROOT = Path(__file__).resolve().parents[1]


class TestExample:
    def test_reference_hyperparameters(self):
        run = parse_config(EXAMPLE)
        loss = run.train.loss
        assert (loss.dist_kind, loss.p, loss.lam, loss.cosface_s, loss.cosface_m) == ("logexp", 1.0, 1.0, 48.0, 0.4)
        assert run.train.plan == AugmentationPlan(((7, 1.0), (14, 1.0), (20, 2.0)))
        assert (run.train.epochs, run.train.lr_milestones, run.train.batch_size) == (20, (12, 17), 64)
        assert run.data.n_identities == 50 and run.data.images_per_identity == 40
        assert run.data_path is None

    def test_shipped_file_matches(self):
        assert load_config(ROOT / "configs" / "example.cfg") == parse_config(EXAMPLE)


class TestParsing:
    def test_empty_gives_defaults(self):
        run = parse_config("")
        assert run.train.plan.resolutions == (112,)
        assert run.train.seed == run.data.seed == 0

    def test_no_augmentation(self):
        run = parse_config("[augment]\nplan = none\n[loss]\nlambda = 0\n")
        assert run.train.plan.resolutions == (112,) and run.train.loss.lam == 0

    def test_small_input(self):
        run = parse_config("[data]\ninput_size = 32\n[model]\nchannel_widths = 4, 8\n[augment]\nplan = 8:1,16:3\n")
        assert run.train.network.input_size == 32 and run.train.network.channel_widths == (4, 8)
        assert run.train.plan.entries == ((8, 1.0), (16, 3.0))

    def test_seed_override(self):
        run = parse_config("[optim]\nseed = 3\n").with_seed(7)
        assert run.train.seed == 7 and run.data.seed == 7

    @pytest.mark.parametrize("text, section, key", [
        ("[loss]\nlambda = abc\n", "loss", "lambda"),
        ("[loss]\nlamda = 1\n", "loss", "lamda"),
        ("[optim]\nepochs = 2.5\n", "optim", "epochs"),
        ("[optim]\ndtype = float16\n", "optim", "dtype"),
        ("[augment]\nplan = 7:1, 200:1\n", "augment", "plan"),
        ("[augment]\nflip_prob = 2\n", "augment", "flip_prob"),
        ("[model]\nchannel_widths = 4, x\n", "model", "channel_widths"),
        ("[loss]\ndistance = cosine\n", "loss", None),
        ("[optim]\nmilestones = 30\n", "optim", None),
        ("[extras]\nfoo = 1\n", "extras", None),
    ])
    def test_errors_name_section_and_key(self, text, section, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.section == section and info.value.key == key
        assert f"[{section}]" in str(info.value)
        if key:
            assert key in str(info.value)

    def test_unparsable(self):
        with pytest.raises(ConfigError):
            parse_config("no section header\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_config(tmp_path / "absent.cfg")
