"""Tour of the pattern library: masks, LoG/ELoG filters and the mixture identity.

Run with ``python demos/pattern_tour.py``.
"""
from patconv import (canonical_scp_set, elog_filter, extended_pattern_set, gaussian_filter,
                     interpolation_depth_bounds, log_2d_approximations, mixture_expectation)

canonical = canonical_scp_set()
print("canonical codes:", list(canonical.codes))
for mask in canonical:
    print(mask, end="\n\n")

g = gaussian_filter(3, 1.0)
print("3x3 gaussian (sigma 1):")
print(g, end="\n\n")

a, b = log_2d_approximations()
print("integer LoG approximations:")
print(a, end="\n\n")
print(b, end="\n\n")

elog = elog_filter()
print("ELoG:")
print(elog, end="\n\n")

# averaging the masked ELoG over the four masks gives an exact rational filter
print("mixture of masked ELoG:")
print(mixture_expectation(canonical, elog), end="\n\n")

desired, maximum = interpolation_depth_bounds()
print(f"3x3 depth: desired {desired}, maximum {maximum}")

for k in (8, 12):
    print(f"k={k} library codes:", list(extended_pattern_set(k).codes))
