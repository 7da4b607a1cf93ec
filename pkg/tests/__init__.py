# Test package for the MTLAM toy pipeline.
