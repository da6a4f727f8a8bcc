"""Small models shared by the tests."""

import torch

from mfskd.arch import BackbonePlan, GeneratorSpec, StudentSpec, TeacherBundle, build_classifier, build_generator, build_student


def tiny_plan(widths=(4, 8), blocks=(1, 1)):
    return BackbonePlan(kind="resnet", block_counts=blocks, widths=widths, stem="cifar", in_channels=3, stem_width=widths[0])


def tiny_setup(num_teachers=2, num_classes=5, size=8, seed=0, dtype=torch.float32, widths=(4, 8), noise_dim=6, gen_width=4):
    """Teachers, student and generator small enough for exhaustive checks."""
    torch.manual_seed(seed)
    plan = tiny_plan(widths)
    teachers = [build_classifier(plan, num_classes).to(dtype) for _ in range(num_teachers)]
    # give the BN layers non-trivial stored statistics
    with torch.no_grad():
        for t in teachers:
            t.train()
            for _ in range(3):
                t(torch.randn(16, 3, size, size, dtype=dtype))
    bundle = TeacherBundle(teachers)
    student = build_student(StudentSpec(plan, num_headers=num_teachers, num_classes=num_classes, layout="aligned")).to(dtype)
    generator = build_generator(GeneratorSpec(noise_dim=noise_dim, output_height=size, output_width=size, base_width=gen_width)).to(dtype)
    return bundle, student, generator


def micro_setup(seed=0):
    """Double-precision models with fewer than 1k parameters each, for
    finite-difference checks."""
    return tiny_setup(num_teachers=2, num_classes=3, size=4, seed=seed, dtype=torch.float64, widths=(2, 3), noise_dim=4, gen_width=2)
