# KMS spectral data, parabolic characteristic numbers and the model heat flow
