import tempfile
from pathlib import Path
from unittest import TestCase

from vsadapt import config
from vsadapt.config import PipelineConfig
from vsadapt.errors import ConfigError

TOY = """\
seed = 7

[synth]
n_subjects = 4
shape = [8, 32, 32]

[translation]
profile = "tiny"
epochs = 2
lr = 1

[translation.architecture]
base_width = 2

[preprocess]
crop_start = [0, 4, 4]
crop_size = [8, 24, 24]
"""


class TestParse(TestCase):

    def test_empty_is_defaults(self) -> None:
        self.assertEqual(config.parse_config(''), PipelineConfig())

    def test_values_are_applied(self) -> None:
        cfg = config.parse_config(TOY)
        self.assertEqual(cfg.seed, 7)
        self.assertEqual(cfg.synth.shape, (8, 32, 32))
        self.assertEqual(cfg.preprocess.crop_start, (0, 4, 4))
        self.assertEqual(cfg.translation.lr, 1)
        self.assertEqual(cfg.architecture().base_width, 2)
        self.assertEqual(cfg.architecture().n_residual, 0)
        self.assertEqual(cfg.preprocess_options().crop_start, (0, 4, 4))

    # Errors point at the offending line
    def test_unknown_key_line(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config('seed = 1\n\n[translation]\nepochs = 5\nepochz = 3\n', 'x.toml')
        self.assertEqual(ctx.exception.line, 5)
        self.assertIn('x.toml:5', str(ctx.exception))

    def test_unknown_section_line(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config('seed = 1\n[extra]\nx = 1\n')
        self.assertEqual(ctx.exception.line, 2)

    def test_nested_unknown_key(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config('[preprocess]\nn_quantiles = 8\n[preprocess.registration]\nlevels = [2]\nsteps = 1\n')
        self.assertEqual(ctx.exception.line, 5)

    def test_wrong_type(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config('[koos]\npretrain = true\nfinetune_epochs = "ten"\n')
        self.assertEqual(ctx.exception.line, 3)
        self.assertRaises(ConfigError, config.parse_config, 'seed = -1\n')
        self.assertRaises(ConfigError, config.parse_config, '[segmentation]\nflip = 1\n')

    def test_choices(self) -> None:
        self.assertRaises(ConfigError, config.parse_config, '[translation]\nvariant = "unet"\n')
        self.assertRaises(ConfigError, config.parse_config, '[translation]\nproxy_tasks = ["vs", "edges"]\n')
        self.assertRaises(ConfigError, config.parse_config, '[preprocess]\ncrop_start = "middle"\n')
        self.assertRaises(ConfigError, config.parse_config, '[preprocess]\ncrop_start = [1, 2]\n')
        self.assertEqual(config.parse_config('[preprocess]\ncrop_start = "auto"\n').preprocess.crop_start, 'auto')

    def test_invalid_toml(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config('seed = 1\n[translation\n')
        self.assertEqual(ctx.exception.line, 2)

    def test_load_missing_file(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            self.assertRaises(ConfigError, config.load_config, Path(tmp) / 'nope.toml')
            path = Path(tmp) / 'vsadapt.toml'
            path.write_text(TOY)
            self.assertEqual(config.load_config(path).seed, 7)


class TestAblations(TestCase):

    # Each ablation changes exactly the keys it names, plus the ablation record itself
    def test_diffs(self) -> None:
        base = PipelineConfig()
        cases = {
            'vs': {'translation.proxy_tasks': (('vs', 'gif'), ('gif',))},
            'gif': {'translation.proxy_tasks': (('vs', 'gif'), ('vs',))},
            'unfreeze': {'koos.unfreeze': (False, True)},
            'no-pretrain': {'koos.pretrain': (True, False)},
        }
        for name, expected in cases.items():
            diff = config.config_diff(base, config.apply_ablations(base, [name]))
            self.assertEqual(diff, {**expected, 'ablations': ((), (name,))})

    def test_combined_and_unknown(self) -> None:
        cfg = config.apply_ablations(PipelineConfig(), ['vs', ' gif ', ''])
        self.assertEqual(cfg.translation.proxy_tasks, ())
        self.assertEqual(cfg.ablations, ('gif', 'vs'))
        self.assertRaises(ConfigError, config.apply_ablations, PipelineConfig(), ['dropout'])


class TestSeedsAndHash(TestCase):

    def test_stage_seed(self) -> None:
        seeds = {stage: config.stage_seed(0, stage) for stage in config.STAGES}
        self.assertEqual(len(set(seeds.values())), len(config.STAGES))
        self.assertTrue(all(0 <= s < 2 ** 32 for s in seeds.values()))
        self.assertEqual(config.stage_seed(0, 'synth'), PipelineConfig().stage_seed('synth'))
        self.assertNotEqual(config.stage_seed(0, 'synth'), config.stage_seed(1, 'synth'))

    def test_stage_seeds_reach_options(self) -> None:
        cfg = PipelineConfig(seed=3)
        self.assertEqual(cfg.translation_options().seed, cfg.stage_seed('train-da'))
        self.assertEqual(cfg.seg_options().seed, cfg.stage_seed('train-seg'))
        self.assertEqual(cfg.phantom_spec().seed, cfg.stage_seed('synth'))

    def test_check_isolation_reaches_options(self) -> None:
        self.assertFalse(PipelineConfig().translation_options().check_isolation)
        cfg = config.parse_config('[translation]\ncheck_isolation = true\n')
        self.assertTrue(cfg.translation_options().check_isolation)

    def test_config_hash(self) -> None:
        a = config.parse_config(TOY)
        self.assertEqual(a.config_hash(), config.parse_config(TOY).config_hash())
        self.assertNotEqual(a.config_hash(), config.parse_config(TOY.replace('seed = 7', 'seed = 8')).config_hash())
        self.assertEqual(len(a.config_hash()), 64)
