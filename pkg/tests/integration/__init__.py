# Integration tests for reply-compression
