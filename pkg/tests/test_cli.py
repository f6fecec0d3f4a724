import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from posterlab import cli
from posterlab.data import load_dataset
from posterlab.experiment import AblationReport


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def gen(self, name: str, count: int, seed: int) -> Path:
        out = self.root / name
        self.assertEqual(cli.main(["gen-data", "--count", str(count), "--seed", str(seed), "--out", str(out)]), 0)
        return out

    def test_gen_data(self):
        out = self.gen("train.pld", 3, 0)
        self.assertEqual(len(load_dataset(out)), 3)

    def test_gen_data_export(self):
        out = self.root / "data.pld"
        argv = ["gen-data", "--count", "2", "--seed", "1", "--out", str(out), "--export", "1"]
        self.assertEqual(cli.main(argv), 0)
        self.assertTrue((self.root / "data" / "00000.png").exists())
        self.assertTrue((self.root / "data" / "00000.json").exists())

    def test_train_sample_eval(self):
        self.gen("train.pld", 2, 0)
        self.gen("test.pld", 2, 1)
        spec = {
            "name": "cli",
            "train_data": "train.pld",
            "test_data": "test.pld",
            "model": {"model_dim": 16, "n_heads": 2, "n_blocks": 1, "time_freq_dim": 16},
            "stages": [{"train": {"batch_size": 2}}],
        }
        spec_path = self.root / "spec.json"
        spec_path.write_text(json.dumps(spec))
        run = self.root / "run"
        self.assertEqual(cli.main(["train", "--spec", str(spec_path), "--out", str(run), "--quiet"]), 0)
        ckpt = run / "model.ckpt"
        self.assertTrue(ckpt.exists())

        samples = self.root / "samples"
        argv = ["sample", "--ckpt", str(ckpt), "--dataset", str(self.root / "test.pld"), "--ids", "0-1"]
        self.assertEqual(cli.main(argv + ["--steps", "2", "--out", str(samples)]), 0)
        self.assertEqual(sorted(p.name for p in samples.iterdir()), ["0.png", "1.png"])

        report = self.root / "eval" / "report.json"
        argv = ["eval", "--ckpt", str(ckpt), "--testset", str(self.root / "test.pld"), "--out", str(report)]
        self.assertEqual(cli.main(argv + ["--steps", "2", "--limit", "1"]), 0)
        self.assertEqual(json.loads(report.read_text())["n_samples"], 1)

    def test_parse_ids(self):
        with self.assertRaises(ValueError):
            cli._parse_ids("0,5", 2)
        self.assertEqual(cli._parse_ids("0-2,4", 5), [0, 1, 2, 4])
        self.assertEqual(cli._parse_ids(None, 3), [0, 1, 2])

    def test_missing_file_exit_code(self):
        argv = ["eval", "--ckpt", str(self.root / "nope.ckpt"), "--testset", str(self.root / "nope.pld")]
        self.assertEqual(cli.main(argv + ["--out", str(self.root / "r.json")]), 1)

    def test_failed_acceptance_exit_code(self):
        failing = AblationReport("cpe", [{"arm": "cpe", "sen_acc": 0.1}], {}, {"sen_acc_gap_at_least_0.15": False})
        passing = AblationReport("cpe", [{"arm": "cpe", "sen_acc": 0.9}], {}, {"sen_acc_gap_at_least_0.15": True})
        spec = self.root / "spec.json"
        spec.write_text(json.dumps({"name": "x", "train_data": "a", "test_data": "b"}))
        argv = ["ablate-cpe", "--spec", str(spec), "--out", str(self.root / "abl"), "--quiet"]
        with mock.patch.object(cli, "ablate_cpe", return_value=failing):
            self.assertEqual(cli.main(argv), 2)
        with mock.patch.object(cli, "ablate_cpe", return_value=passing):
            self.assertEqual(cli.main(argv), 0)


if __name__ == "__main__":
    unittest.main()
