"""
A short end-to-end run
======================

Builds a cohort, fits the teacher and the evaluation encoder on the target
pool, trains the bridge for 1000 steps and compares the translated test
slices with the untranslated ones.  Takes about ten minutes on one CPU core.  The same pipeline from
the shell::

    ulfbridge make-data --out data --slices 32 --test-subjects 20 --subjects 100
    ulfbridge pretrain-teacher --data data --out teacher.safetensors
    ulfbridge train-encoder --data data --out encoder.safetensors
    ulfbridge train --data data --teacher teacher.safetensors --out run --steps 2000
    ulfbridge evaluate --ckpt run/final.safetensors --data data --mode paired --out paired.json
    ulfbridge evaluate --ckpt run/final.safetensors --data data --mode unpaired \\
        --encoder encoder.safetensors --out unpaired.json

The test split is larger than the library default because FID on a few
dozen slices is dominated by estimator bias.  The acceptance tests run the
same setup for 2000 steps.
"""

# %%
import tempfile
from pathlib import Path

from ulfbridge.diffusion import TeacherConfig, train_teacher
from ulfbridge.metrics import EncoderConfig, evaluate_paired, evaluate_unpaired, train_feature_encoder
from ulfbridge.synth_data import build_cohorts
from ulfbridge.trainer import TrainConfig, identity_translator, load_translator, train

tmp = Path(tempfile.mkdtemp())
man = build_cohorts(tmp / "data", n_subjects=100, slices_per_subject=32, split={"paired_test_count": 20})
target = man.slices("target_pool")
teacher = train_teacher(target, TeacherConfig())
encoder = train_feature_encoder(target, EncoderConfig())

# %%
state, records = train(TrainConfig(total_steps=1000, checkpoint_every=0), man, teacher, out_dir=tmp / "run")
print("critic updates", state.critic_updates, " generator updates", state.generator_updates)
print("last generator record:", {k: round(v, 3) for k, v in records[-5].items() if isinstance(v, float)})

# %%
test = man.slices("paired_test")
for name, tr in (("degraded", identity_translator), ("translated", load_translator(tmp / "run" / "final.safetensors"))):
    u = evaluate_unpaired(tr, test, target, encoder)
    p = evaluate_paired(tr, man)
    print(f"{name:>10}: FID {u['fid']['aggregate']:8.1f}  PSNR(T1) {p['psnr_t1']['aggregate']:.2f}"
          f"  MS-SSIM(T1) {p['ms_ssim_t1']['aggregate']:.4f}")
