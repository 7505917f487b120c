# Training stages package
