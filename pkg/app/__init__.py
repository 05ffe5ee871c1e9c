# Hierarchical molecular graph pretraining toolkit
