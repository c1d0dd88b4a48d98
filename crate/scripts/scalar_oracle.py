#!/usr/bin/env python3
"""Reference values for the distillation losses from plain scalar arithmetic.

Prints `name value` lines with 10 decimals. Uses only the `math` module so
that it shares no code with the Rust implementation.
"""
import math


def kd_single_row(teacher, student):
    # -1/C * sum_c q_c log p_c for one proposal
    c = len(teacher)
    return -sum(q * math.log(p) for q, p in zip(teacher, student)) / c


def unbiased_single_row(teacher, student, n_old):
    # background absorbs the student's mass on classes the teacher never saw
    bg = student[0] + sum(student[n_old:])
    aggregated = [bg] + list(student[1:n_old])
    return kd_single_row(teacher, aggregated)


def rpn_objectness(teacher_s, student_s):
    return sum((t - s) ** 2 for t, s in zip(teacher_s, student_s)) / len(teacher_s)


def main():
    values = {
        "kd_loss": kd_single_row([0.7, 0.3], [0.7, 0.3]),
        "unbiased_kd_box": unbiased_single_row([0.6, 0.4], [0.3, 0.4, 0.3], 2),
        "unbiased_kd_box_bg_moved": unbiased_single_row([0.6, 0.4], [0.0, 0.4, 0.6], 2),
        "mask_kd_single_pixel": kd_single_row([0.7, 0.3], [0.7, 0.3]),
        "rpn_kd": rpn_objectness([2.0], [0.0]),
    }
    for name, v in values.items():
        print(f"{name} {v:.10f}")


if __name__ == "__main__":
    main()
