"""Scratch calibration for the defense-effect acceptance setup (dev only)."""

import sys
import time

import numpy as np

sys.path.insert(0, "tests")

from sensireg.attacks import AttackConfig, decision_oracle_for, hop_skip_jump
from sensireg.data import gen_synthetic, split
from sensireg.evaluate import (BudgetSweep, adversarial_test_accuracy_sweep)
from sensireg.nn import predict_labels
from sensireg.regularizers import JacobRegConfig, LossWeights, NsConfig
from sensireg.train import TrainConfig, lambda_search, pretrain, robustify

from helpers import logit_deviation_probe, mlp_model

t0 = time.time()

SEED = 42
NS_EPS = 0.25
data = gen_synthetic("blobs", n=900, dim=2, num_classes=3, noise_std=0.05,
                     seed=SEED)
train_set, test_set = split(data, [2 / 3, 1 / 3], seed=SEED)
print(f"train={len(train_set)} test={len(test_set)}")

base = mlp_model([2, 32, 32, 3], np.random.default_rng(SEED), dtype=np.float32)
pre_cfg = TrainConfig(learning_rate=1e-2, epochs=40, batch_size=64, seed=SEED)
pre = pretrain(base, train_set, pre_cfg, test_set)
print(f"pretrained acc train={pre.final_train_acc:.3f} val={pre.final_val_acc:.3f} "
      f"({time.time()-t0:.1f}s)")
pretrained = pre.model

ns_cfg = NsConfig(ns_eps=NS_EPS, n_samples=5)
jr_cfg = JacobRegConfig(n_projections=1, fd_step=1e-2)

search_cfg = TrainConfig(learning_rate=2e-3, epochs=1, batch_size=64,
                         ns_cfg=ns_cfg, jr_cfg=jr_cfg, seed=SEED)
ns_search = lambda_search(pretrained, train_set, "ns", search_cfg, test_set)
print(f"ns lambda: {ns_search.recommended:.4f} (lambda0={ns_search.lambda0:.4f}, "
      f"r0={ns_search.r0:.4f}) ({time.time()-t0:.1f}s)")
jac_search = lambda_search(pretrained, train_set, "jacobian", search_cfg, test_set)
print(f"jacob lambda: {jac_search.recommended:.4f} (lambda0={jac_search.lambda0:.4f}, "
      f"r0={jac_search.r0:.4f}) ({time.time()-t0:.1f}s)")

def robust_with(weights, epochs=30, lr=2e-3):
    cfg = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=64,
                      weights=weights, ns_cfg=ns_cfg, jr_cfg=jr_cfg, seed=SEED)
    return robustify(pretrained, train_set, cfg, test_set)

ns_run = robust_with(LossWeights(lambda_ns=ns_search.recommended))
print(f"ns model acc={ns_run.final_val_acc:.3f} ({time.time()-t0:.1f}s)")
jac_run = robust_with(LossWeights(lambda_jacob=jac_search.recommended))
print(f"jacob model acc={jac_run.final_val_acc:.3f} ({time.time()-t0:.1f}s)")
comb_run = robust_with(LossWeights(lambda_ns=ns_search.recommended,
                                   lambda_jacob=jac_search.recommended))
print(f"combined model acc={comb_run.final_val_acc:.3f} ({time.time()-t0:.1f}s)")

# (a) sensitivity reduction
probe_x = test_set.inputs[:64]
before = logit_deviation_probe(pretrained, probe_x, NS_EPS, 64, seed=7)
after = logit_deviation_probe(ns_run.model, probe_x, NS_EPS, 64, seed=7)
print(f"(a) deviation before={before:.4f} after={after:.4f} "
      f"ratio={after/before:.3f} (need <=0.5)")

# (b) PGD adversarial test accuracy at mid-range eps
pgd_cfg = AttackConfig(kind="pgd", n_iter=200, eps_iter=0.01, seed=SEED)
sweep = BudgetSweep(budgets=(0.3, 0.5, 1.0))
rows_std = adversarial_test_accuracy_sweep(pretrained, pgd_cfg, test_set,
                                           sweep, n_samples=64)
rows_ns = adversarial_test_accuracy_sweep(ns_run.model, pgd_cfg, test_set,
                                          sweep, n_samples=64)
rows_comb = adversarial_test_accuracy_sweep(comb_run.model, pgd_cfg, test_set,
                                            sweep, n_samples=64)
for eps, std_row, ns_row, comb_row in zip(sweep.budgets, rows_std, rows_ns, rows_comb):
    print(f"(b) eps={eps}: std={std_row.accuracy:.3f} ns={ns_row.accuracy:.3f} "
          f"comb={comb_row.accuracy:.3f}")
print(f"({time.time()-t0:.1f}s)")

# (c) HSJ median successful distance: undefended vs jacobian-regularized
def hsj_distances(model, n=50, max_iter=30, b0=50):
    oracle = decision_oracle_for(model)
    idx = np.random.default_rng(SEED).permutation(len(test_set))[:n]
    preds = predict_labels(model, test_set.inputs)
    dists = {}
    for i in idx:
        x = test_set.inputs[int(i)]
        if preds[int(i)] != test_set.labels[int(i)]:
            continue
        out = hop_skip_jump(oracle, x, max_iter=max_iter,
                            init_grad_queries=b0, seed=int(i))
        if out.success:
            dists[int(i)] = out.l2_distance
    return dists

d_std = hsj_distances(pretrained)
d_jac = hsj_distances(jac_run.model)
d_comb = hsj_distances(comb_run.model)
common_jac = sorted(set(d_std) & set(d_jac))
inc_jac = sum(1 for i in common_jac if d_jac[i] > d_std[i])
common_comb = sorted(set(d_std) & set(d_comb))
inc_comb = sum(1 for i in common_comb if d_comb[i] > d_std[i])
print(f"(c) hsj: std median={np.median(list(d_std.values())):.4f} "
      f"jac median={np.median(list(d_jac.values())):.4f} "
      f"increases {inc_jac}/{len(common_jac)}")
print(f"(d) comb median={np.median(list(d_comb.values())):.4f} "
      f"increases {inc_comb}/{len(common_comb)}")
print(f"total {time.time()-t0:.1f}s")
