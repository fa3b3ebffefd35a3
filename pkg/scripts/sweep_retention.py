"""Hyperparameter sweep over the 4-task rotated stream: how do sparsity
strength, learning rate, and epochs trade off new-task learning against
retention of task 1, for the masked variant vs the unconstrained baseline."""

import itertools
from multiprocessing import Pool

import numpy as np

from oacl import (TrainConfig, avg_final_accuracy, build_and_pretrain,
                  gen_base, gen_task_stream, run_sequence,
                  stack_overlap_summary)


def one_run(args):
    variant, lorth, l2, tau, lr, epochs, seed = args
    base = gen_base(seed, 8, 32, 200)
    bb = build_and_pretrain(seed, 32, 64, 4, 8, base, steps=1200)
    stream = gen_task_stream(seed, 4, 8, 32, n_train_per_class=250)
    cfg = TrainConfig(seed=seed, variant=variant, lambda_orth=lorth,
                      lambda_l2=l2, tau_init=tau, lr=lr, epochs=epochs)
    res = run_sequence(bb, stream, cfg)
    ov = stack_overlap_summary(res.stack)["mean_overlap"]
    reff = np.array([r.r_eff_per_layer for r in res.reports])
    return (args, avg_final_accuracy(res.matrix), res.matrix.a[0, 3],
            np.diag(res.matrix.a), ov, reff.mean(axis=1))


if __name__ == "__main__":
    jobs = []
    for l2, tau, lr, epochs in itertools.product(
            (0.1, 0.5), (1e-3, 1e-4), (1e-3, 3e-3), (20, 40)):
        jobs.append(("oa_adapter", 1.0, l2, tau, lr, epochs, 0))
    for lr, epochs in itertools.product((1e-3, 3e-3), (20, 40)):
        jobs.append(("inc_adapter", 0.0, 0.1, 1e-4, lr, epochs, 0))

    with Pool(4) as pool:
        for (args, avg, t1, diag, ov, reff) in pool.imap_unordered(one_run, jobs):
            variant, lorth, l2, tau, lr, epochs, seed = args
            print(f"{variant:<12} l2={l2} tau={tau:g} lr={lr:g} ep={epochs:<3}"
                  f" avg={avg:.3f} task1_final={t1:.3f}"
                  f" diag={np.round(diag, 2)} overlap={ov:.3f}"
                  f" mean_reff={np.round(reff, 1)}", flush=True)
