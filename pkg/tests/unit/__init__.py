# Unit tests for reply-compression
