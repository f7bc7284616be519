"""Linear in-context learning of pixel-dense features from dense cues."""
